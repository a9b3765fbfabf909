from .ekf import ObservationSetup, filter_segment
from .model import EiBrainModel, NetworkModel, Nonlinearity, ParameterLayout, ParameterVector

__all__ = [
    "EiBrainModel",
    "NetworkModel",
    "Nonlinearity",
    "ObservationSetup",
    "ParameterLayout",
    "ParameterVector",
    "filter_segment",
]
