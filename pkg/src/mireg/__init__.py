"""Multi-instance rigid registration of a model inside a scene point cloud."""

from .geom import PointCloud, RigidTransform, SuperpointGraph
from .metrics import EvalReport, SuccessProfile
from .pipeline import PipelineConfig, register, run_baseline
from .pose import RegistrationResult

__all__ = [
    "EvalReport",
    "PipelineConfig",
    "PointCloud",
    "RegistrationResult",
    "RigidTransform",
    "SuccessProfile",
    "SuperpointGraph",
    "register",
    "run_baseline",
]
__version__ = "0.1.0"
