"""Small float64 reverse-mode autodiff engine and the AdamW optimizer."""

from . import ops
from .gradcheck import numeric_gradient, relative_error
from .optim import AdamW, adamw_step
from .params import (
    CheckpointError,
    ParameterStore,
    load_checkpoint,
    load_into,
    save_checkpoint,
    sidecar_path,
)
from .tensor import NonFiniteError, Tensor, as_tensor

__all__ = [
    "AdamW",
    "CheckpointError",
    "NonFiniteError",
    "ParameterStore",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "load_checkpoint",
    "load_into",
    "numeric_gradient",
    "ops",
    "relative_error",
    "save_checkpoint",
    "sidecar_path",
]
