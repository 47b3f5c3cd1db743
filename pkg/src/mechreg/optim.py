"""Gradient descent with Armijo backtracking, shared by the trainers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Divergence


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool


def minimize_gd(
    fun,
    x0,
    tol=1e-6,
    max_iter=5000,
    armijo_c=1e-4,
    shrink=0.5,
    initial_step=1.0,
    min_step=1e-16,
    callback=None,
):
    """Minimize fun(x) -> (value, grad) by backtracking gradient descent.

    Stops when the gradient sup-norm drops below tol. The accepted step is
    reused (and grown) across iterations so well-scaled problems take few
    function evaluations. callback(x, value), when given, sees the starting
    point and then every accepted iterate.
    """
    x = np.asarray(x0, dtype=float).copy()
    value, grad = fun(x)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise Divergence("objective not finite at the starting point", iterate=x)
    if callback is not None:
        callback(x, value)
    step = float(initial_step)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        gnorm_inf = np.max(np.abs(grad)) if grad.size else 0.0
        if gnorm_inf < tol:
            return OptimResult(x, value, grad, iterations - 1, True)
        gsq = float(np.sum(grad * grad))
        accepted = False
        while step >= min_step:
            candidate = x - step * grad
            cand_value, cand_grad = fun(candidate)
            if np.isfinite(cand_value) and cand_value <= value - armijo_c * step * gsq:
                accepted = True
                break
            step *= shrink
        if not accepted:
            # flat to machine precision along the gradient ray
            return OptimResult(x, value, grad, iterations, False)
        x, value, grad = candidate, cand_value, cand_grad
        if not np.all(np.isfinite(grad)) or not np.isfinite(value) or value < -1e30:
            raise Divergence("objective diverged", iterate=x)
        if callback is not None:
            callback(x, value)
        step = min(step * 2.0, 1e8)
    return OptimResult(x, value, grad, max_iter, bool(np.max(np.abs(grad)) < tol))
