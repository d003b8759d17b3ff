"""Human segmentation and velocity estimation on sequences of LiDAR range images."""
from ._accel import backend
from .errors import ConfigurationError, FormatError, LidarSeqError, TrainingError, UsageError

__version__ = "0.1.0"

__all__ = ["backend", "ConfigurationError", "FormatError", "LidarSeqError", "TrainingError", "UsageError"]
