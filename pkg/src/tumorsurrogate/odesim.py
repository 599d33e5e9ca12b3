"""Integration of mass-action ODEs built from a :class:`ReactionSystem`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .reactions import ReactionSystem
from .series import EnsembleSeries


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OdeProblem:
    system: ReactionSystem
    y0: np.ndarray
    t_span: tuple[float, float]

    def __post_init__(self):
        y0 = np.asarray(self.y0, dtype=float)
        if y0.shape != (len(self.system.species),):
            raise ValueError(f"y0 has shape {y0.shape}, expected ({len(self.system.species)},)")
        if np.any(y0 < 0):
            raise ValueError("initial state must be non-negative")
        t0, t1 = map(float, self.t_span)
        if not t1 > t0:
            raise ValueError("t_span must be increasing")
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "t_span", (t0, t1))


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"  # "rk4" (fixed step), "adaptive" (DOP853) or "stiff" (LSODA)
    step: float = 1e-3
    rtol: float = 1e-8
    atol: float = 1e-8
    clip_tol: float = 1e-10
    max_norm: float = 1e8

    def __post_init__(self):
        if self.method not in ("rk4", "adaptive", "stiff"):
            raise ValueError(f"unknown method {self.method!r}")
        if min(self.step, self.rtol, self.atol) <= 0:
            raise ValueError("step and tolerances must be positive")


@dataclass
class Solution:
    times: np.ndarray
    states: np.ndarray
    species: tuple[str, ...]
    steps: int = 0
    rejected: int = 0
    negative_excursion: bool = False
    diagnostics: dict = field(default_factory=dict)

    def to_series(self, scenario_id: str = "") -> EnsembleSeries:
        return EnsembleSeries(self.times, self.states, species=self.species, scenario_id=scenario_id)

    def to_csv(self, path=None) -> str:
        return self.to_series().to_csv(path)


def _rk4(problem: OdeProblem, config: SolverConfig, t_out: np.ndarray) -> Solution:
    system = problem.system
    nu_t = system.stoichiometry.T
    k = system.rates

    def f(y):
        return (system.unit_propensities(y) * k) @ nu_t

    y = problem.y0.copy()
    t = problem.t_span[0]
    states = np.empty((t_out.size, y.size))
    steps = 0
    excursion = False
    for n, target in enumerate(t_out):
        span = target - t
        if span > 0:
            m = max(1, int(np.ceil(span / config.step - 1e-9)))
            h = span / m
            for _ in range(m):
                k1 = f(y)
                k2 = f(y + 0.5 * h * k1)
                k3 = f(y + 0.5 * h * k2)
                k4 = f(y + h * k3)
                y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
                steps += 1
                if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > config.max_norm:
                    raise IntegrationError(f"solution diverged near t={t + h:.4g}")
                if np.any(y < 0):
                    excursion |= bool(np.any(y < -config.clip_tol))
                    y = np.maximum(y, 0.0)
            t = target
        states[n] = y
    return Solution(t_out, states, system.species.names, steps=steps, negative_excursion=excursion)


def _adaptive(problem: OdeProblem, config: SolverConfig, t_out: np.ndarray) -> Solution:
    system = problem.system
    nu_t = system.stoichiometry.T
    k = system.rates
    max_norm = config.max_norm

    def f(_t, y):
        return (system.unit_propensities(np.maximum(y, 0.0)) * k) @ nu_t

    def blowup(_t, y):
        return max_norm - np.max(np.abs(y))

    blowup.terminal = True
    if config.method == "stiff":
        def jac(_t, y):
            return system.jacobian(np.maximum(y, 0.0))

        extra = dict(method="LSODA", jac=jac)
    else:
        extra = dict(method="DOP853")
    res = solve_ivp(
        f, problem.t_span, problem.y0, t_eval=t_out,
        rtol=config.rtol, atol=config.atol, events=blowup, **extra,
    )
    if res.status != 0 or res.y.shape[1] != t_out.size:
        raise IntegrationError(f"adaptive integration failed: {res.message}")
    states = res.y.T
    if not np.all(np.isfinite(states)):
        raise IntegrationError("non-finite state")
    excursion = bool(np.any(states < -config.clip_tol))
    states = np.maximum(states, 0.0)
    return Solution(
        t_out, states, system.species.names, steps=int(res.nfev // 12),
        negative_excursion=excursion, diagnostics={"nfev": int(res.nfev)},
    )


def integrate(problem: OdeProblem, config: SolverConfig | None = None, t_eval=None) -> Solution:
    """Integrate ``problem``; states are reported at ``t_eval`` (default: span ends)."""
    config = config or SolverConfig()
    t0, t1 = problem.t_span
    t_out = np.array([t0, t1]) if t_eval is None else np.asarray(t_eval, dtype=float)
    if t_out.size == 0 or t_out[0] < t0 - 1e-12 or t_out[-1] > t1 + 1e-12 or np.any(np.diff(t_out) <= 0):
        raise ValueError("t_eval must be increasing and inside t_span")
    t_out = np.clip(t_out, t0, t1)
    if len(problem.system) == 0:
        return Solution(t_out, np.tile(problem.y0, (t_out.size, 1)), problem.system.species.names)
    if config.method == "rk4":
        return _rk4(problem, config, t_out)
    return _adaptive(problem, config, t_out)


def compare(solution: Solution, series: EnsembleSeries, atol: float = 1e-9) -> np.ndarray:
    """Per-species RMSE between the solution and the series at the series' times."""
    idx = np.searchsorted(solution.times, series.times - atol)
    ok = idx < solution.times.size
    ok[ok] &= np.abs(solution.times[idx[ok]] - series.times[ok]) <= atol * (1 + np.abs(series.times[ok]))
    if not np.all(ok):
        missing = series.times[~ok]
        raise ValueError(f"solution does not cover {missing.size} series time points (first: {missing[0]:.6g})")
    if tuple(solution.species) != tuple(series.species):
        raise ValueError(f"species mismatch {solution.species} vs {series.species}")
    diff = solution.states[idx] - series.values
    return np.sqrt(np.mean(diff**2, axis=0))
