"""Tensor type and tape-recorded ops.

Design notes:
  * float32 is the working dtype; build parameters in float64 when running
    the finite-difference checker.  Ops inherit the dtype of their inputs.
  * The tape is implicit: each op output keeps references to its parents
    and a closure computing their gradient contributions.  backward() runs
    the closures in reverse topological order.  Gradients accumulate until
    explicitly zeroed.
  * Expensive composites (attention, layer norm, cross entropy) are single
    tape nodes with hand-written backward rules, which keeps graphs per
    sample at a few dozen nodes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class NNCoreError(Exception):
    pass


class ShapeError(NNCoreError):
    pass


class NumericError(NNCoreError):
    pass


class ConfigError(NNCoreError):
    pass


class UsageError(NNCoreError):
    pass


# Every Tensor constructed (leaf or op output) is checked for NaN/inf while
# this is True.  Cheap at the array sizes used here; flip off for profiling.
CHECK_FINITE = True

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the context (inference / FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = _coerce(data)
        if CHECK_FINITE and not np.isfinite(arr).all():
            raise NumericError("non-finite values in tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of self w.r.t. every reachable parent.

        self must be a scalar attached to the tape; repeated calls without
        zero_grad() accumulate.
        """
        if self.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward on a tensor detached from the tape")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- sugar; everything routes through the module-level ops -------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -float(other))
        return add(self, scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _node(out: np.ndarray, parents, bwd) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if track:
        return Tensor(out, requires_grad=True, _parents=parents, _backward=bwd)
    return Tensor(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _want(t) -> Tensor:
    if isinstance(t, Tensor):
        return t
    return Tensor(t)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _want(a), _want(b)
    out = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _want(a), _want(b)
    out = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def bwd(g):
        _accum(a, g * s)

    return _node(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=a.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _node(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = a.data.mean(dtype=a.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _node(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _want(a), _want(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(out, (a, b), bwd)


def take_rows(a: Tensor, ids) -> Tensor:
    """Row gather, the embedding-lookup primitive."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ShapeError(f"take_rows wants a flat id list, got shape {ids.shape}")
    if a.ndim != 2:
        raise ShapeError(f"take_rows wants a 2-d table, got {a.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise IndexError(f"row id out of range [0, {a.shape[0]})")
    out = a.data[ids]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, ids, g)
        _accum(a, buf)

    return _node(out, (a,), bwd)


def concat0(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat0 expects matching 2-d rows, got {a.shape} / {b.shape}")
    out = np.concatenate([a.data, b.data], axis=0)
    na = a.shape[0]

    def bwd(g):
        _accum(a, g[:na])
        _accum(b, g[na:])

    return _node(out, (a, b), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; train-time only, p == 0 is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout needs an rng in train mode")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = x.data * mask

    def bwd(g):
        _accum(x, g * mask)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities / normalization
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximate GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        dx = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner
        _accum(x, g * dx)

    return _node(out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _node(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, (dxhat - m1 - xhat * m2) * inv)
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accum(bias, g.reshape(-1, d).sum(axis=0))

    return _node(out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over full sequences.

    Inputs are post-projection (Lq x d) / (Lk x d).  There is deliberately
    no mask argument: conditioning sequences are exact-length and the canvas
    is attended bidirectionally, so no masking path exists.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention expects 2-d q/k/v")
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d:
        raise ShapeError(f"attention width mismatch: {q.shape} {k.shape} {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k/v length mismatch: {k.shape} vs {v.shape}")
    if d % n_heads != 0:
        raise ConfigError(f"model width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    lq, lk = q.shape[0], k.shape[0]
    inv_s = 1.0 / math.sqrt(hd)

    def split(t):
        return t.reshape(-1, n_heads, hd).transpose(1, 0, 2)  # (H, L, hd)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.transpose(0, 2, 1)) * inv_s  # (H, Lq, Lk)
    scores -= scores.max(axis=-1, keepdims=True)
    ea = np.exp(scores)
    attn = ea / ea.sum(axis=-1, keepdims=True)
    oh = attn @ vh
    out = oh.transpose(1, 0, 2).reshape(lq, d)

    def bwd(g):
        gh = g.reshape(lq, n_heads, hd).transpose(1, 0, 2)
        g_attn = gh @ vh.transpose(0, 2, 1)
        g_v = attn.transpose(0, 2, 1) @ gh
        dot = (g_attn * attn).sum(axis=-1, keepdims=True)
        g_scores = attn * (g_attn - dot) * inv_s
        g_q = g_scores @ kh
        g_k = g_scores.transpose(0, 2, 1) @ qh
        _accum(q, g_q.transpose(1, 0, 2).reshape(lq, d))
        _accum(k, g_k.transpose(1, 0, 2).reshape(lk, d))
        _accum(v, g_v.transpose(1, 0, 2).reshape(lk, d))

    return _node(out, (q, k, v), bwd)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, target_ids, weights) -> Tensor:
    """Weighted sum of per-row negative log-likelihoods.

    Rows with weight 0 contribute nothing (their targets may be anything
    valid); weights must be non-negative, targets within the vocabulary.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy wants 2-d logits, got {logits.shape}")
    n, vocab = logits.shape
    ids = np.asarray(target_ids, dtype=np.intp)
    w = np.asarray(weights, dtype=logits.dtype)
    if ids.shape != (n,) or w.shape != (n,):
        raise ShapeError(f"targets/weights must be flat length {n}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"target id out of vocabulary [0, {vocab})")
    if (w < 0).any():
        raise ValueError("negative loss weight")
    xd = logits.data
    m = xd.max(axis=1, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    nll = lse - xd[np.arange(n), ids]
    out = (w * nll).sum(dtype=logits.dtype)

    def bwd(g):
        soft = np.exp(z)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), ids] -= 1.0
        _accum(logits, soft * (w * g)[:, None])

    return _node(out, (logits,), bwd)
