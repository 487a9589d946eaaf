"""Multi-session fruit counting, 3D localization and cross-session association.

Per session: masks plus LiDAR give per-fruit point clouds, a tracker links
them across frames, and a box-constrained reprojection refinement places
each fruit. Across sessions: ICP aligns the static scene, then a two-stage
matcher (appearance and position, then topology relative to confident
reference fruits) links fruits between dates.
"""

from .associate import associate, baseline_histogram, baseline_position, run_method
from .config import PipelineConfig
from .core import (
    Detection,
    FruitLandmark,
    Intrinsics,
    Mask,
    PointCloud,
    Pose,
    SessionMap,
    TemporalMatchSet,
    Track,
)
from .errors import AlgorithmError, InputError, Orchard4DError
from .kernels import BACKEND
from .pipeline import localize, register_sessions
from .registration import RigidTransform, icp_align

__version__ = "0.1.0"

__all__ = [
    "AlgorithmError",
    "BACKEND",
    "Detection",
    "FruitLandmark",
    "InputError",
    "Intrinsics",
    "Mask",
    "Orchard4DError",
    "PipelineConfig",
    "PointCloud",
    "Pose",
    "RigidTransform",
    "SessionMap",
    "TemporalMatchSet",
    "Track",
    "associate",
    "baseline_histogram",
    "baseline_position",
    "icp_align",
    "localize",
    "register_sessions",
    "run_method",
]
