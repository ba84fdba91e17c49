"""
A synthetic calibrated scene
============================

Four cameras on a ring look at five ellipsoid pedestrians and one orange
box.  Everything downstream (segmentation, fitting, detection) reads the
files this writes.
"""
import sys
from pathlib import Path

import numpy as np

from mvped import synth, tensorio

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_scene")
cfg = synth.SynthConfig(seed=0)
scene = synth.generate(cfg, out)

print("pedestrians (x, y) in meters:")
print(np.round(scene.positions, 2))
print("distractor box:", np.round(scene.box[0], 2), "to", np.round(scene.box[1], 2))

# per view: how much of the image each class covers
for cam, lab in zip(scene.calibration.cameras, scene.labels):
    ped = (lab >= synth.PED_BASE).mean()
    box = (lab == synth.BOX).mean()
    print(f"view {cam.view_id}: pedestrian pixels {ped:.1%}, box pixels {box:.1%}")

# the per-pixel features are color + class embedding + noise
print("feature stack", scene.features.shape, "semantic maps", scene.semantic.shape)

# previews
for n, img in enumerate(scene.images):
    tensorio.write_image_ppm(out / "preview" / f"view_{n}.ppm", img)
    tensorio.write_image_pgm(out / "preview" / f"gt_mask_{n}.pgm", scene.gt_masks[n])
print("wrote", out)
