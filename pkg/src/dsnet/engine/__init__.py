"""NumPy tensor engine: primitives, tape-based reverse mode, deterministic RNG."""

from .functional import (
    EVAL,
    TRAIN,
    BatchNormParams,
    batch_norm,
    bilinear_resize,
    concat_channels,
    conv2d,
    cross_entropy_and_grad,
    dropout,
    global_avg_pool,
    pool2d,
    relu,
    sum_all,
    transposed_conv2d,
    weighted_cross_entropy,
    weighted_sum,
)
from .rng import RngState
from .tensor import EngineError, NonFiniteError, ShapeError, Tape, TapeError, Tensor, as_tensor, backward

__all__ = [
    "EVAL",
    "TRAIN",
    "BatchNormParams",
    "EngineError",
    "NonFiniteError",
    "RngState",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "batch_norm",
    "bilinear_resize",
    "concat_channels",
    "conv2d",
    "cross_entropy_and_grad",
    "dropout",
    "global_avg_pool",
    "pool2d",
    "relu",
    "sum_all",
    "transposed_conv2d",
    "weighted_cross_entropy",
    "weighted_sum",
]
