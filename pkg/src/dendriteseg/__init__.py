"""Volumetric dendrite segmentation at desk scale.

Grayscale tomography-style volumes in, binary dendrite masks out: classical
baselines, a small autodiff engine, 2D/3D U-Net and 3D FCDense networks,
patch-based training and inference, a two-step asynchronous successive
halving hyperparameter search, and boundary-aware evaluation metrics.
"""

__version__ = "0.1.0"

from .backend import HAS_NUMBA, active_backend, set_backend  # noqa: F401
