"""Central finite-difference verification of hand-derived gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class GradCheckError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


@dataclass
class GradCheckReport:
    max_abs_error: float
    max_rel_error: float
    worst_coordinate: tuple[int, ...]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: max_rel={self.max_rel_error:.3e} max_abs={self.max_abs_error:.3e} "
            f"worst_coord={self.worst_coordinate} tol={self.tolerance:.1e}"
        )


def finite_diff_check(
    loss_evaluator: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grad: np.ndarray,
    epsilon: float = 1e-5,
    tolerance: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic_grad against central differences of loss_evaluator
    at params, coordinate by coordinate.

    Relative error uses the infinity norm of the two gradients as scale, so
    coordinates where both gradients vanish do not produce spurious blowup.
    """
    if not 0 < epsilon <= 1e-2:
        raise GradCheckError("bad_epsilon", f"epsilon must be in (0, 1e-2], got {epsilon}")
    params = np.asarray(params, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if params.shape != analytic.shape:
        raise GradCheckError(
            "shape_mismatch", f"params {params.shape} vs gradient {analytic.shape}"
        )
    if loss_evaluator(params.copy()) != loss_evaluator(params.copy()):
        raise GradCheckError("non_deterministic", "two identical evaluations disagree")

    fd = np.zeros_like(analytic)
    flat = params.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = loss_evaluator(params)
        flat[i] = orig - epsilon
        lo = loss_evaluator(params)
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2 * epsilon)

    abs_err = np.abs(fd - analytic)
    scale = max(np.abs(fd).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    rel_err = abs_err / scale
    worst = np.unravel_index(int(np.argmax(rel_err)), analytic.shape) if analytic.size else (0,)
    return GradCheckReport(
        max_abs_error=float(abs_err.max(initial=0.0)),
        max_rel_error=float(rel_err.max(initial=0.0)),
        worst_coordinate=tuple(int(w) for w in worst),
        tolerance=tolerance,
    )
