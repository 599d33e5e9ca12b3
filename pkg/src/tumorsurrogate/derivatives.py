"""Numerical time derivatives of sampled trajectories."""

from __future__ import annotations

import numpy as np


def central_difference(y: np.ndarray, dt: float) -> np.ndarray:
    """Central differences inside, one-sided stencils at both ends.

    The end stencils use four points (third order) when available so the end
    error does not dominate the interior ``dt**2 / 6 * |y'''|`` bound.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 samples, got {n}")
    d = np.empty_like(y)
    d[1:-1] = (y[2:] - y[:-2]) / (2 * dt)
    if n >= 4:
        d[0] = (-11 * y[0] + 18 * y[1] - 9 * y[2] + 2 * y[3]) / (6 * dt)
        d[-1] = (11 * y[-1] - 18 * y[-2] + 9 * y[-3] - 2 * y[-4]) / (6 * dt)
    else:
        d[0] = (-3 * y[0] + 4 * y[1] - y[2]) / (2 * dt)
        d[-1] = (3 * y[-1] - 4 * y[-2] + y[-3]) / (2 * dt)
    return d


def kalman_derivative(y: np.ndarray, dt: float, noise_ratio: float = 1e3) -> np.ndarray:
    """Velocity estimate of a constant-acceleration Rauch-Tung-Striebel smoother.

    ``noise_ratio`` is the jerk spectral density divided by the measurement
    variance; only the ratio affects the smoothed estimate.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        return np.column_stack([kalman_derivative(col, dt, noise_ratio) for col in y.T])
    n = y.size
    if n < 3:
        raise ValueError(f"need at least 3 samples, got {n}")
    F = np.array([[1.0, dt, 0.5 * dt**2], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    q = noise_ratio
    Q = q * np.array([
        [dt**5 / 20, dt**4 / 8, dt**3 / 6],
        [dt**4 / 8, dt**3 / 3, dt**2 / 2],
        [dt**3 / 6, dt**2 / 2, dt],
    ])
    H = np.array([1.0, 0.0, 0.0])
    R = 1.0

    xs = np.zeros((n, 3))
    Ps = np.zeros((n, 3, 3))
    xp = np.zeros((n, 3))
    Pp = np.zeros((n, 3, 3))
    x = np.array([y[0], 0.0, 0.0])
    P = np.diag([R, 1e6, 1e6])
    for k in range(n):
        if k:
            x = F @ x
            P = F @ P @ F.T + Q
        xp[k], Pp[k] = x, P
        S = H @ P @ H + R
        K = P @ H / S
        x = x + K * (y[k] - H @ x)
        P = P - np.outer(K, H @ P)
        xs[k], Ps[k] = x, P

    for k in range(n - 2, -1, -1):
        C = Ps[k] @ F.T @ np.linalg.inv(Pp[k + 1])
        xs[k] = xs[k] + C @ (xs[k + 1] - xp[k + 1])
        Ps[k] = Ps[k] + C @ (Ps[k + 1] - Pp[k + 1]) @ C.T
    return xs[:, 1]


def estimate_derivatives(values: np.ndarray, dt: float, method: str = "central", noise_ratio: float = 1e3) -> np.ndarray:
    """Column-wise derivative of an (n_samples, n_species) array."""
    values = np.asarray(values, dtype=float)
    if method == "central":
        return central_difference(values, dt)
    if method == "kalman":
        return kalman_derivative(values, dt, noise_ratio)
    raise ValueError(f"unknown derivative method {method!r}")
