"""Pre-norm transformer block with optional cross-attention.

Sub-layer order: self-attention, cross-attention (when a conditioning
sequence is present), MLP; each applied as x + sublayer(layer_norm(x)).
With all parameters zero the block is the identity, which the tests pin.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, attention, dropout, gelu, layer_norm, matmul, add


def _linear_shapes(name: str, n_in: int, n_out: int) -> dict:
    return {f"{name}.w": (n_in, n_out), f"{name}.b": (n_out,)}


def transformer_block_shapes(prefix: str, d: int, ff: int, cross: bool) -> dict:
    """Parameter name -> shape map for one block."""
    shapes: dict = {}
    shapes[f"{prefix}ln_self.g"] = (d,)
    shapes[f"{prefix}ln_self.b"] = (d,)
    for nm in ("self_q", "self_k", "self_v", "self_o"):
        shapes.update(_linear_shapes(prefix + nm, d, d))
    if cross:
        shapes[f"{prefix}ln_cross.g"] = (d,)
        shapes[f"{prefix}ln_cross.b"] = (d,)
        for nm in ("cross_q", "cross_k", "cross_v", "cross_o"):
            shapes.update(_linear_shapes(prefix + nm, d, d))
    shapes[f"{prefix}ln_mlp.g"] = (d,)
    shapes[f"{prefix}ln_mlp.b"] = (d,)
    shapes.update(_linear_shapes(prefix + "mlp_in", d, ff))
    shapes.update(_linear_shapes(prefix + "mlp_out", ff, d))
    return shapes


def init_transformer_block(params, prefix: str, d: int, ff: int, cross: bool,
                           rng: np.random.Generator, std: float = 0.02) -> None:
    """Register one block's parameters on a ModelParams store."""
    for name, shape in transformer_block_shapes(prefix, d, ff, cross).items():
        if name.endswith(".w"):
            arr = rng.normal(0.0, std, size=shape)
        elif name.endswith("ln_self.g") or name.endswith("ln_cross.g") or name.endswith("ln_mlp.g"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params.add(name, arr.astype(params.dtype))


def _lin(params, name: str, x: Tensor) -> Tensor:
    return add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def transformer_block_forward(params, prefix: str, x: Tensor, cond: Tensor | None,
                              n_heads: int, dropout_p: float = 0.0,
                              rng: np.random.Generator | None = None) -> Tensor:
    """Run one block; cond=None skips the cross-attention sub-layer."""

    def maybe_drop(t: Tensor) -> Tensor:
        if dropout_p > 0.0:
            return dropout(t, dropout_p, rng)
        return t

    h = layer_norm(x, params[f"{prefix}ln_self.g"], params[f"{prefix}ln_self.b"])
    a = attention(_lin(params, prefix + "self_q", h),
                  _lin(params, prefix + "self_k", h),
                  _lin(params, prefix + "self_v", h), n_heads)
    x = add(x, maybe_drop(_lin(params, prefix + "self_o", a)))

    if cond is not None:
        h = layer_norm(x, params[f"{prefix}ln_cross.g"], params[f"{prefix}ln_cross.b"])
        a = attention(_lin(params, prefix + "cross_q", h),
                      _lin(params, prefix + "cross_k", cond),
                      _lin(params, prefix + "cross_v", cond), n_heads)
        x = add(x, maybe_drop(_lin(params, prefix + "cross_o", a)))

    h = layer_norm(x, params[f"{prefix}ln_mlp.g"], params[f"{prefix}ln_mlp.b"])
    m = _lin(params, prefix + "mlp_out", gelu(_lin(params, prefix + "mlp_in", h)))
    return add(x, maybe_drop(m))
