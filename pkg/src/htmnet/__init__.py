"""HTMNet: transparent-object depth completion on a numpy autodiff engine."""

from .autodiff import NonFiniteError, ShapeError, Tape, TapeError, Tensor, grad_check, precision
from .model import HTMNet, ModelConfig, tiny_config

__all__ = ["HTMNet", "ModelConfig", "NonFiniteError", "ShapeError", "Tape", "TapeError", "Tensor",
           "grad_check", "precision", "tiny_config"]
__version__ = "0.1.0"
