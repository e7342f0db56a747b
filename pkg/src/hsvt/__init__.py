"""Hybrid spiking vision transformer for event-camera object detection."""

from .autodiff import NonFiniteError, Parameter, Tensor, backward, grad_check
from .backbone import DEFAULT_PLACEMENT, PLACEMENT_ROWS, HsVT, HsVTConfig
from .detect import DetectionModel, HeadConfig, map_50, map_50_95
from .neurons import NeuronConfig

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Parameter", "backward", "grad_check", "NonFiniteError",
    "HsVT", "HsVTConfig", "DEFAULT_PLACEMENT", "PLACEMENT_ROWS",
    "DetectionModel", "HeadConfig", "map_50", "map_50_95", "NeuronConfig",
]
