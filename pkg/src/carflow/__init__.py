"""Flow matching with condition-aware reparameterisation of the source and target endpoints."""

from .config import ExperimentConfig, load_config
from .data import DataSpec, four_corners_2d, sample_conditional, two_class_1d
from .model import CarModel
from .reparam import CarVariant, SingularMapError, check_shift_equivalence
from .schedule import LINEAR, Schedule, get_schedule, interpolate
from .velocity_net import NetSpec

__version__ = "0.1.0"

__all__ = [
    "CarModel", "CarVariant", "DataSpec", "ExperimentConfig", "LINEAR", "NetSpec", "Schedule",
    "SingularMapError", "check_shift_equivalence", "four_corners_2d", "get_schedule", "interpolate",
    "load_config", "sample_conditional", "two_class_1d",
]
