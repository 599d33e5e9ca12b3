"""Sparse mass-action model learning from ensemble time series.

The target is the stacked derivative vector ``(C', H', I')`` and the design
matrix has one column per library reaction: column ``j`` holds
``nu_j[s] * a_j(y(t))`` for every species block ``s`` and sample ``t``.
Non-negative least squares then selects and weights the reactions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import least_squares

from .derivatives import estimate_derivatives
from .nnls import solve_nnls
from .odesim import IntegrationError, OdeProblem, SolverConfig, compare, integrate
from .reactions import LibrarySpec, ReactionSystem, generate_library
from .series import EnsembleSeries

STRIDES = (1, 10, 20, 40, 50)

LIBRARY_ALIASES = {
    "complete": "three_species_generated_default",
    "constrained": "three_species_constrained_default",
    "union12": "three_species_union_12",
    "two-species-17": "two_species_17",
}


def resolve_library(name: str | LibrarySpec | ReactionSystem) -> ReactionSystem:
    if isinstance(name, ReactionSystem):
        return name
    if isinstance(name, str):
        name = LIBRARY_ALIASES.get(name, name)
    return generate_library(name)


@dataclass(frozen=True)
class LearningConfig:
    stride: int = 10
    derivative_method: str = "central"
    prune_threshold: float = 1e-6  # relative to the largest fitted rate
    library: str = "constrained"
    kalman_ratio: float = 1e3

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.prune_threshold < 0:
            raise ValueError("prune_threshold must be non-negative")
        if self.derivative_method not in ("central", "kalman"):
            raise ValueError(f"unknown derivative method {self.derivative_method!r}")

    @property
    def label(self) -> str:
        return f"{self.library}-{self.derivative_method}-s{self.stride}"


@dataclass
class LearnedModel:
    library: ReactionSystem
    rates: np.ndarray
    support: tuple[int, ...]
    residual: float
    config: LearningConfig | None = None
    scenario_id: str = ""
    refined: bool = False

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)
        if self.rates.shape != (len(self.library),):
            raise ValueError("one rate per library reaction required")
        if np.any(self.rates < 0):
            raise ValueError("rates must be non-negative")

    @property
    def system(self) -> ReactionSystem:
        """The supported reactions with their fitted rates."""
        return self.library.subset(self.support).with_rates(self.rates[list(self.support)])

    def support_labels(self) -> list[str]:
        return [self.library.format_reaction(self.library[j]) for j in self.support]

    def sidecar(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "config": asdict(self.config) if self.config else None,
            "library_size": len(self.library),
            "support": [int(j) for j in self.support],
            "support_labels": self.support_labels(),
            "residual": self.residual,
            "refined": self.refined,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        self.system.to_json(path)
        path.with_suffix(".meta.json").write_text(json.dumps(self.sidecar(), indent=2) + "\n")


@dataclass
class UnionModel:
    library: ReactionSystem
    support: tuple[int, ...]
    members: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def system(self) -> ReactionSystem:
        return self.library.subset(self.support)

    def labels(self) -> list[str]:
        return self.system.labels()


def subsample(series: EnsembleSeries, stride: int) -> EnsembleSeries:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride == 1:
        return series
    sl = slice(None, None, stride)
    return EnsembleSeries(
        series.times[sl], series.values[sl], species=series.species,
        replications=series.replications, scenario_id=series.scenario_id,
        extra={k: np.asarray(v)[sl] for k, v in series.extra.items()},
    )


def series_derivatives(series: EnsembleSeries, method: str = "central", kalman_ratio: float = 1e3) -> np.ndarray:
    if len(series) < 3:
        raise ValueError("need at least 3 samples to differentiate")
    return estimate_derivatives(series.values, series.uniform_step(), method, kalman_ratio)


def build_design_matrix(
    library: ReactionSystem, values: np.ndarray, derivatives: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked design matrix and target, species-major row blocks."""
    values = np.asarray(values, dtype=float)
    derivatives = np.asarray(derivatives, dtype=float)
    n_species = len(library.species)
    if values.ndim != 2 or values.shape[1] != n_species:
        raise ValueError(f"data has shape {values.shape}; library has {n_species} species")
    if derivatives.shape != values.shape:
        raise ValueError(f"derivatives {derivatives.shape} do not match data {values.shape}")
    P = library.unit_propensities(values)
    nu = library.stoichiometry
    A = np.concatenate([P * nu[s] for s in range(n_species)], axis=0)
    b = derivatives.T.reshape(-1)
    return A, b


def prune(rates: np.ndarray, threshold: float) -> tuple[int, ...]:
    top = float(np.max(rates, initial=0.0))
    if top <= 0:
        return ()
    return tuple(int(j) for j in np.flatnonzero(rates > threshold * top))


def learn_model(
    library: ReactionSystem | str,
    series: EnsembleSeries,
    config: LearningConfig | None = None,
    derivatives: np.ndarray | None = None,
) -> LearnedModel:
    """Subsample, differentiate, regress with NNLS and prune.

    When ``derivatives`` is given it must be aligned with ``series`` before
    subsampling and is used instead of numerical differentiation.
    """
    config = config or LearningConfig()
    library = resolve_library(library)
    data = subsample(series, config.stride)
    if derivatives is None:
        d = series_derivatives(data, config.derivative_method, config.kalman_ratio)
    else:
        d = np.asarray(derivatives, dtype=float)[:: config.stride]
    A, b = build_design_matrix(library, data.values, d)
    rates, _ = solve_nnls(A, b)
    support = prune(rates, config.prune_threshold)
    rates = np.where(np.isin(np.arange(len(rates)), support), rates, 0.0)
    residual = float(np.linalg.norm(A @ rates - b))
    return LearnedModel(library, rates, support, residual, config, series.scenario_id)


def union_model(models: Sequence[LearnedModel]) -> UnionModel:
    if not models:
        raise ValueError("no models to unite")
    library = models[0].library
    for m in models[1:]:
        if m.library != library:
            raise ValueError("models were learned on different libraries")
    support = sorted(set().union(*(m.support for m in models)))
    members = {m.scenario_id or str(i): m.support for i, m in enumerate(models)}
    return UnionModel(library, tuple(support), members)


def refit(
    union: UnionModel | ReactionSystem,
    series: EnsembleSeries,
    config: LearningConfig | None = None,
    derivatives: np.ndarray | None = None,
) -> LearnedModel:
    """NNLS restricted to the union's reactions; rates are not pruned."""
    system = union.system if isinstance(union, UnionModel) else union
    if len(system) == 0:
        raise ValueError("cannot refit an empty union")
    config = config or LearningConfig()
    data = subsample(series, config.stride)
    if derivatives is None:
        d = series_derivatives(data, config.derivative_method, config.kalman_ratio)
    else:
        d = np.asarray(derivatives, dtype=float)[:: config.stride]
    A, b = build_design_matrix(system, data.values, d)
    rates, residual = solve_nnls(A, b)
    support = tuple(range(len(system)))
    return LearnedModel(system, rates, support, residual, config, series.scenario_id)


def _trajectory_with_sensitivities(
    system: ReactionSystem, rates: np.ndarray, y0: np.ndarray, times: np.ndarray, max_norm: float = 1e3
):
    """States and d(state)/d(rates) along the model trajectory at ``times``."""
    n, m = len(system.species), len(system)
    nu = system.stoichiometry
    eye_m = np.eye(m)

    def f(_t, z):
        y = np.maximum(z[:n], 0.0)
        S = z[n:].reshape(n, m)
        a = system.unit_propensities(y)
        J = nu @ (rates[:, None] * system.propensity_jacobian(y))
        return np.concatenate([nu @ (rates * a), (J @ S + nu * a).ravel()])

    def jac(_t, z):
        # the second-order term dJ/dy S is dropped; BDF only needs an approximation
        y = np.maximum(z[:n], 0.0)
        P = system.propensity_jacobian(y)
        J = nu @ (rates[:, None] * P)
        out = np.zeros((n + n * m, n + n * m))
        out[:n, :n] = J
        out[n:, n:] = np.kron(J, eye_m)
        out[n:, :n] = (nu[:, :, None] * P[None, :, :]).reshape(n * m, n)
        return out

    def blowup(_t, z):
        return max_norm - np.max(np.abs(z[:n]))

    blowup.terminal = True
    z0 = np.concatenate([y0, np.zeros(n * m)])
    res = solve_ivp(
        f, (times[0], times[-1]), z0, method="BDF", jac=jac, t_eval=times, rtol=1e-7, atol=1e-10, events=blowup
    )
    if res.status != 0 or res.y.shape[1] != times.size or not np.all(np.isfinite(res.y)):
        raise IntegrationError(f"sensitivity integration failed: {res.message}")
    Z = res.y.T
    return Z[:, :n], Z[:, n:].reshape(-1, n, m)


def _shooting_problem(system: ReactionSystem, series: EnsembleSeries, windows: int):
    """Residual and Jacobian callables for a (multiple-)shooting trajectory fit.

    The sample grid is cut into ``windows`` consecutive pieces; each piece is
    integrated from the observed state at its first sample, so errors made in
    one window do not propagate into the next. ``windows=1`` is ordinary
    single shooting from the series' initial state.
    """
    times, data = series.times, series.values
    edges = np.unique(np.linspace(0, len(times) - 1, windows + 1).round().astype(int))
    pieces = [(a, b) for a, b in zip(edges[:-1], edges[1:])]
    size = sum(b - a for a, b in pieces) * data.shape[1]
    m = len(system)
    cache: dict[bytes, tuple | None] = {}

    def run(k):
        key = k.tobytes()
        if key not in cache:
            cache.clear()
            try:
                res, jac = [], []
                for a, b in pieces:
                    Y, S = _trajectory_with_sensitivities(system, k, data[a], times[a : b + 1])
                    res.append((Y[1:] - data[a + 1 : b + 1]).ravel())
                    jac.append(S[1:].reshape(-1, m))
                cache[key] = (np.concatenate(res), np.concatenate(jac))
            except IntegrationError:
                cache[key] = None
        return cache[key]

    def residual(k):
        out = run(k)
        return np.full(size, 1e3) if out is None else out[0]

    def jacobian(k):
        out = run(k)
        return np.zeros((size, m)) if out is None else out[1]

    return residual, jacobian


def refine_rates(
    model: LearnedModel, series: EnsembleSeries, max_nfev: int = 40, windows: int = 10
) -> LearnedModel:
    """Adjust the rates of ``model`` so its integrated trajectory fits ``series``.

    Bounded least squares (rates >= 0) on trajectory residuals, started from
    the given rates. A multiple-shooting pass over ``windows`` pieces comes
    first; it keeps the problem well conditioned when the starting model's
    trajectory is far from the data. A single-shooting pass from the series'
    initial state follows. Whichever of the start, the multiple-shooting
    result and the final result has the smallest single-shooting error is
    returned, so refinement never makes the fit worse. The support is kept.
    """
    system = model.system
    if len(system) == 0:
        return model
    single, single_jac = _shooting_problem(system, series, 1)
    opts = dict(bounds=(0.0, np.inf), x_scale="jac", max_nfev=max_nfev)
    start = system.rates
    candidates = [start]
    if windows > 1:
        multi, multi_jac = _shooting_problem(system, series, windows)
        candidates.append(least_squares(multi, start, jac=multi_jac, **opts).x)
    for k0 in list(candidates):
        candidates.append(least_squares(single, k0, jac=single_jac, **opts).x)
    k = min(candidates, key=lambda c: float(np.sum(single(c) ** 2)))
    rates = np.zeros(len(model.library))
    rates[list(model.support)] = k
    return LearnedModel(model.library, rates, model.support, model.residual, model.config, model.scenario_id, refined=True)


SCORE_SOLVER = SolverConfig(method="adaptive", rtol=1e-10, atol=1e-12)


def score_model(
    model: LearnedModel | ReactionSystem, series: EnsembleSeries, solver: SolverConfig = SCORE_SOLVER
) -> np.ndarray:
    """Per-species RMSE of the model ODE started from the series' first sample."""
    system = model.system if isinstance(model, LearnedModel) else model
    problem = OdeProblem(system, series.initial_state, (series.times[0], series.times[-1]))
    solution = integrate(problem, solver, t_eval=series.times)
    return compare(solution, series)


def safe_score(model, series, solver: SolverConfig = SCORE_SOLVER) -> np.ndarray:
    """Like :func:`score_model` but maps integration failure to ``inf``."""
    try:
        return score_model(model, series, solver)
    except IntegrationError:
        return np.full(len(series.species), math.inf)


@dataclass
class Candidate:
    config: LearningConfig
    support_size: int
    score: float
    payload: object = None


def select_model(candidates: Sequence[Candidate], tolerance: float = 0.10) -> Candidate:
    """Smallest support whose score is within ``tolerance`` of the best score."""
    finite = [c for c in candidates if math.isfinite(c.score)]
    if not finite:
        raise ValueError("no candidate produced a finite score")
    best = min(c.score for c in finite)
    ok = [c for c in finite if c.score <= best * (1 + tolerance)]
    return min(ok, key=lambda c: (c.support_size, c.score))
