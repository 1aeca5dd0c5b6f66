"""3D-aware image editing engine.

Depth-lifted rigid edits, flow-field inversion with z-buffering,
gradient-domain depth compositing, and energy-guided deterministic DDIM
sampling, runnable end to end with analytic mock denoisers and
synthetic scenes.
"""

from .core import ActivationRecord, FeatureMap, Mask, ScalarField
from .geometry import CameraIntrinsics, PointGrid, RigidTransform
from .flow import FlowField
from .guidance import GuidanceContext, GuidanceSchedule
from .diffusion import Denoiser, MockDenoiser, NoiseSchedule

__all__ = [
    "ActivationRecord",
    "CameraIntrinsics",
    "Denoiser",
    "FeatureMap",
    "FlowField",
    "GuidanceContext",
    "GuidanceSchedule",
    "Mask",
    "MockDenoiser",
    "NoiseSchedule",
    "PointGrid",
    "RigidTransform",
    "ScalarField",
]

__version__ = "0.1.0"
