"""Occlusion-aware non-rigid point cloud registration.

A sine-activated coordinate network predicts per-point displacements; it is
fit by minimizing a bidirectional correntropy loss between the deformed
source and the target plus a locally-linear-reconstruction regularizer.
"""

__version__ = "0.1.0"

from .pointcloud_io import PointCloud, load_cloud, save_cloud  # noqa: E402
from .registration import RegistrationConfig, RegistrationResult, register  # noqa: E402
from .evaluation import Metrics, evaluate  # noqa: E402

__all__ = ["PointCloud", "load_cloud", "save_cloud", "RegistrationConfig", "RegistrationResult",
           "register", "Metrics", "evaluate", "__version__"]
