"""
From masks to people on the ground plane
========================================

Fit a density/color voxel grid so that its renders match the masks and the
masked images in every view, then read detections off the top-down maximum.
Takes about half a minute on one core.
"""
import numpy as np

from mvped import pipeline, synth
from mvped.config import RunConfig

run = RunConfig(seed=0)


def progress(report):
    if report.iteration % 100 == 0:
        print(f"iter {report.iteration:4d}  total {report.total:.4f}  mask {report.l_mask:.4f}"
              f"  color {report.l_color:.4f}  vbr {report.l_vbr:.4f}")


result = pipeline.run_synthetic(run, callback=progress)

print("\ndetections (x, y, score):")
for d in result.detections:
    print(f"  {d.x:5.2f} {d.y:5.2f}  {d.score:.2f}")
print("ground truth:")
for p in synth.build_scene(run.synth).positions:
    print(f"  {p[0]:5.2f} {p[1]:5.2f}")
m = result.metrics
print(f"\nMODA {m.moda:.2f}  MODP {m.modp:.2f}  precision {m.precision:.2f}  recall {m.recall:.2f}")
print("BEV occupancy %.4f" % pipeline.bev_occupancy(result.fit.scene.density))

# a crude top-down picture, y up, rows pooled in pairs so no peak is skipped
top = np.flipud(result.bev.T)
top = top.reshape(top.shape[0] // 2, 2, -1).max(axis=1)
chars = " .:-=+*#%@"
for row in top:
    print("".join(chars[min(int(v * 10), 9)] for v in row))
