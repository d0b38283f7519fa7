"""Weakly supervised 3D cube fitting from 2D boxes, depth maps and class size priors."""

__version__ = "0.1.0"

from .geometry import Box2D, CameraIntrinsics, Cube  # noqa: E402
from .losses import ClassPrior, LossWeights  # noqa: E402

__all__ = ["Box2D", "CameraIntrinsics", "ClassPrior", "Cube", "LossWeights", "__version__"]
