"""Parameter store and AdamW with decoupled weight decay.

Clipping is applied to the global gradient norm before the moment update;
decay multiplies the weights directly and never touches the moments.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ConfigError, Tensor, UsageError


class ModelParams:
    """Ordered name -> Tensor map plus AdamW state (m, v, step) and meta.

    meta carries the model hyperparameters so a checkpoint is
    self-describing; it is persisted alongside the weights.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.meta: dict[str, str] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        self.m[name] = np.zeros(t.shape, dtype=self.dtype)
        self.v[name] = np.zeros(t.shape, dtype=self.dtype)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def astype(self, dtype) -> "ModelParams":
        """Copy with a new dtype; optimizer state resets (used by grad_check)."""
        out = ModelParams(dtype)
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        out.meta = dict(self.meta)
        return out

    def copy(self) -> "ModelParams":
        out = ModelParams(self.dtype)
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        out.m = {k: a.copy() for k, a in self.m.items()}
        out.v = {k: a.copy() for k, a in self.v.items()}
        out.step = self.step
        out.meta = dict(self.meta)
        return out


def adamw_step(params: ModelParams, lr: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.01,
               clip_norm: float | None = 1.0) -> float:
    """One update over all parameters; returns the pre-clip gradient norm."""
    if lr <= 0.0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    for name, t in params.items():
        if t.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient")

    gnorm = params.grad_norm()
    scale = 1.0
    if clip_norm is not None and gnorm > clip_norm:
        scale = clip_norm / gnorm

    params.step += 1
    t_step = params.step
    bc1 = 1.0 - b1**t_step
    bc2 = 1.0 - b2**t_step
    for name, p in params.items():
        g = p.grad if scale == 1.0 else p.grad * params.dtype.type(scale)
        m = params.m[name]
        v = params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return gnorm
