"""Finite-difference verification of the tape's gradients.

Central differences, every coordinate of every parameter.  Requires
float64 parameters: at float32 the FD quotient is dominated by rounding
and the comparison is meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .optim import ModelParams
from .tensor import ConfigError, no_grad


@dataclass
class GradCheckReport:
    tolerance: float
    eps: float
    per_param: dict[str, float] = field(default_factory=dict)  # name -> max rel error
    max_rel_error: float = 0.0
    worst_param: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
                f"(param {self.worst_param!r}, tolerance {self.tolerance:.1e})")


def grad_check(loss_fn, params: ModelParams, eps: float = 1e-4,
               tolerance: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of loss_fn() against central differences.

    loss_fn must be deterministic and close over `params`; it is re-run
    2 * n_params times with single-coordinate perturbations.
    """
    for name, t in params.items():
        if t.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 params ({name} is {t.dtype})")

    params.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros(t.shape))
                for name, t in params.items()}

    report = GradCheckReport(tolerance=tolerance, eps=eps)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = loss_fn().item()
                flat[i] = orig - eps
                f_minus = loss_fn().item()
                flat[i] = orig
                num[i] = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[name].reshape(-1)
        # the floor keeps FD cancellation noise (~machine eps * |loss| / eps)
        # on near-zero gradients from masquerading as a backward bug
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-6)
        rel = float((np.abs(a - num) / denom).max()) if flat.size else 0.0
        report.per_param[name] = rel
        if rel > report.max_rel_error:
            report.max_rel_error = rel
            report.worst_param = name
    return report
