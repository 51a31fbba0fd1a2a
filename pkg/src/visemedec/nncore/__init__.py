"""Minimal reverse-mode autodiff core on numpy arrays.

Everything the denoiser and length predictor need, nothing more: a Tensor
type with a recorded tape, fused ops for the expensive pieces (attention,
layer norm, cross entropy), an AdamW step with global-norm clipping, and a
finite-difference gradient checker.
"""

from .tensor import (
    CHECK_FINITE,
    ConfigError,
    NNCoreError,
    NumericError,
    ShapeError,
    Tensor,
    UsageError,
    add,
    attention,
    concat0,
    cross_entropy,
    dropout,
    gelu,
    layer_norm,
    matmul,
    mean_all,
    mul,
    no_grad,
    scale,
    softmax,
    sum_all,
    take_rows,
)
from .transformer import init_transformer_block, transformer_block_forward, transformer_block_shapes
from .optim import ModelParams, adamw_step
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "CHECK_FINITE",
    "ConfigError",
    "GradCheckReport",
    "ModelParams",
    "NNCoreError",
    "NumericError",
    "ShapeError",
    "Tensor",
    "UsageError",
    "adamw_step",
    "add",
    "attention",
    "concat0",
    "cross_entropy",
    "dropout",
    "gelu",
    "grad_check",
    "init_transformer_block",
    "layer_norm",
    "matmul",
    "mean_all",
    "mul",
    "no_grad",
    "scale",
    "softmax",
    "sum_all",
    "take_rows",
    "transformer_block_forward",
    "transformer_block_shapes",
]
