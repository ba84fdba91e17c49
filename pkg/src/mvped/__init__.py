"""Unsupervised multi-view pedestrian detection on a calibrated camera rig.

Pseudo masks come from iterated PCA on per-pixel features, a voxel
density/color volume is fitted to them by differentiable rendering, and
pedestrians are read off the column-wise maximum of the density.
"""
__version__ = "0.1.0"
