"""
Unsupervised pedestrian masks from features
===========================================

A single principal component splits "objects" from background, but the box
is an object too.  Re-running the PCA inside the current foreground and
keeping the side the semantic map prefers removes it.  A third pass has
nothing left to separate except the pedestrians' own colors, so it cuts
into them.
"""
import numpy as np

from mvped import sis, synth

scene = synth.build_scene(synth.SynthConfig(seed=1))
h, w = scene.images.shape[1:3]
gt = scene.gt_masks

for iterations in (1, 2, 3):
    for select in (False, True):
        cfg = sis.SisConfig(iterations=iterations, semantic_selection=select)
        try:
            masks = sis.sis_segment(scene.features, scene.semantic, cfg, image_size=(h, w))
        except sis.SegmentationError as exc:
            print(f"T={iterations} selection={select!s:5}: {exc}")
            continue
        print(f"T={iterations} selection={select!s:5}: IoU {sis.mask_iou(masks, gt):.3f}")

# the first component by itself, on all pixels
X = sis.center_features(scene.features)
pc = sis.first_principal_component(X)
w_all, _ = np.linalg.eigh(X.T @ X / len(X))
print("explained variance of the first component: %.2f" % (pc.eigenvalue / w_all.sum()))
