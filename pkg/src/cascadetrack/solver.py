"""Conjugate gradient for symmetric positive definite systems and ridge normal equations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    rel_residual: float
    converged: bool


def conjugate_gradient(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    x0: np.ndarray | None = None,
    tol: float = 1e-6,
    max_iters: int = 60,
) -> CGResult:
    """Solve ``H x = b`` for SPD ``H`` given as a matrix-vector product.

    Stops when ``||b - H x|| / ||b|| <= tol`` or after ``max_iters`` steps.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), 0, 0.0, True)
    r = b - matvec(x)
    p = r.copy()
    rr = r @ r
    it = 0
    while np.sqrt(rr) / bnorm > tol and it < max_iters:
        hp = matvec(p)
        php = p @ hp
        if php <= 0.0:
            break  # lost positive curvature, numerically converged
        alpha = rr / php
        x += alpha * p
        r -= alpha * hp
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    rel = float(np.sqrt(rr) / bnorm)
    return CGResult(x, it, rel, rel <= tol)


def ridge_matvec(a: np.ndarray, lam: float, penalty: np.ndarray | None = None):
    """``v -> (A^T A + lam * diag(penalty)) v``; ``penalty`` defaults to all ones."""
    pen = np.ones(a.shape[1]) if penalty is None else np.asarray(penalty, dtype=np.float64)

    def mv(v):
        return a.T @ (a @ v) + lam * pen * v

    return mv


def solve_ridge(
    a: np.ndarray,
    y: np.ndarray,
    lam: float,
    penalty: np.ndarray | None = None,
    x0: np.ndarray | None = None,
    tol: float = 1e-6,
    max_iters: int = 60,
) -> CGResult:
    """Minimize ``||A w - y||^2 + lam * sum(penalty * w^2)`` by CG on the normal equations."""
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return conjugate_gradient(ridge_matvec(a, lam, penalty), a.T @ y, x0=x0, tol=tol, max_iters=max_iters)
