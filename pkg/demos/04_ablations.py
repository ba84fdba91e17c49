"""
Ablations on synthetic scenes
=============================

Turns off the vertical BEV regularizer, then swaps the multi-view fusion
rule.  Each row is averaged over the seeds given on the command line
(default 0 1 2).  Expect roughly 30 s per fit.
"""
import sys

from mvped import ablation
from mvped.config import RunConfig

seeds = [int(s) for s in sys.argv[1:]] or [0, 1, 2]
base = RunConfig()

rows = ablation.run_variants(base, ablation.vbr_variants(), seeds)
print(ablation.format_table(rows, f"Vertical regularizer, seeds {seeds}"))
print()

# fusion only reaches the density through the linear decoder
rows = ablation.run_variants(base, ablation.fusion_variants(), seeds)
print(ablation.format_table(rows, f"Fusion rule (linear decoder), seeds {seeds}"))
