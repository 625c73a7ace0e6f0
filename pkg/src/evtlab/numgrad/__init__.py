"""Minimal reverse-mode automatic differentiation over float64 arrays."""
from . import ops
from .checkpoint import CheckpointError, load_store, read_checkpoint, save_store, write_checkpoint
from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import ParamStore, lstm_cell
from .optim import Adam, NonFiniteGradient
from .tensor import ShapeError, Tape, Tensor, backward, no_grad

__all__ = [
    "Adam",
    "CheckpointError",
    "NonFiniteGradient",
    "ParamStore",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "check_gradients",
    "load_store",
    "lstm_cell",
    "no_grad",
    "numeric_grad",
    "ops",
    "read_checkpoint",
    "relative_error",
    "save_store",
    "write_checkpoint",
]
