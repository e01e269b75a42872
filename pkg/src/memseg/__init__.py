"""Built-in memory module for semantic segmentation, on a small numpy autodiff core."""
from .diffnum import DegenerateVectorError, NonFiniteError, ShapeError, Tensor
from .memory import MemoryBank, read, triplet_loss, write
from .model import EncoderSpec, SegModel
from .training import TrainConfig, fit

__all__ = [
    "DegenerateVectorError",
    "EncoderSpec",
    "MemoryBank",
    "NonFiniteError",
    "SegModel",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "fit",
    "read",
    "triplet_loss",
    "write",
]

__version__ = "0.1.0"
