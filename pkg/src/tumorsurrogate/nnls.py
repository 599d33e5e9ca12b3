"""Lawson-Hanson active-set solver for non-negative least squares."""

from __future__ import annotations

import numpy as np


class NNLSConvergenceError(RuntimeError):
    """Raised when the iteration cap is hit; carries the best iterate found."""

    def __init__(self, message: str, x: np.ndarray, residual: float):
        super().__init__(message)
        self.x = x
        self.residual = residual


def solve_nnls(
    A: np.ndarray,
    b: np.ndarray,
    tol: float | None = None,
    max_iter: int | None = None,
) -> tuple[np.ndarray, float]:
    """Minimise ``||A x - b||_2`` subject to ``x >= 0``.

    Columns are rescaled to unit norm before the active-set iteration, which
    leaves the minimiser unchanged up to the inverse scaling. Returns the
    solution and the residual norm.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if A.ndim != 2 or A.shape[0] != b.size:
        raise ValueError(f"incompatible shapes A{A.shape}, b{b.shape}")
    m, n = A.shape
    if n == 0:
        return np.zeros(0), float(np.linalg.norm(b))

    norms = np.linalg.norm(A, axis=0)
    live = norms > 0
    scale = np.where(live, norms, 1.0)
    As = A / scale
    if tol is None:
        tol = 10 * np.finfo(float).eps * max(m, n) * max(1.0, float(np.linalg.norm(b)))
    if max_iter is None:
        max_iter = 3 * n

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = As.T @ b
    outer = 0
    while True:
        candidates = ~passive & live & (w > tol)
        if not candidates.any():
            break
        if outer >= max_iter:
            xb = x / scale
            raise NNLSConvergenceError(
                f"NNLS did not converge in {max_iter} iterations", xb, float(np.linalg.norm(A @ xb - b))
            )
        outer += 1
        j = int(np.argmax(np.where(candidates, w, -np.inf)))
        passive[j] = True
        first = True
        frozen = False
        while True:
            idx = np.flatnonzero(passive)
            z = np.zeros(n)
            z[idx] = np.linalg.lstsq(As[:, idx], b, rcond=None)[0]
            if first and z[j] <= 0:
                # round-off made the entering column useless; freeze it for this sweep
                passive[j] = False
                frozen = True
                break
            first = False
            if np.all(z[idx] > 0):
                x = z
                break
            neg = idx[z[idx] <= 0]
            alpha = np.min(x[neg] / (x[neg] - z[neg]))
            x = x + alpha * (z - x)
            passive &= x > tol * 1e-3
            x[~passive] = 0.0
            if not passive.any():
                break
        if frozen:
            w[j] = 0.0
        else:
            w = As.T @ (b - As @ x)
    x = x / scale
    return x, float(np.linalg.norm(A @ x - b))


def kkt_violation(A: np.ndarray, b: np.ndarray, x: np.ndarray) -> float:
    """Largest breach of the NNLS optimality conditions at ``x``."""
    g = A.T @ (A @ x - b)
    pos = x > 0
    return float(max(np.max(np.abs(g[pos]), initial=0.0), np.max(-g[~pos], initial=0.0), np.max(-x, initial=0.0)))
