"""Steady states of the learned three-species surrogate.

The union model's right-hand side has the shape

    C' = t1 C + t2 I + t3 C^2 + t4 C H + t5 C I
    H' = f1 H + f2 C^2 + f3 C H + f4 H^2
    I' = l1 I + l2 C^2 + l3 C H + l4 C I

(``t`` = theta, ``f`` = phi, ``l`` = lambda). Eliminating I and then H for
C != 0 leaves a polynomial of degree at most four in C, whose positive real
roots give candidate equilibria.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .odesim import OdeProblem, SolverConfig, integrate
from .reactions import ReactionSystem

SPECIES = ("C", "H", "I")

# allowed monomials per equation, as exponent tuples over (C, H, I)
_THETA_TERMS = ((1, 0, 0), (0, 0, 1), (2, 0, 0), (1, 1, 0), (1, 0, 1))
_PHI_TERMS = ((0, 1, 0), (2, 0, 0), (1, 1, 0), (0, 2, 0))
_LAMBDA_TERMS = ((0, 0, 1), (2, 0, 0), (1, 1, 0), (1, 0, 1))
_TERMS = (_THETA_TERMS, _PHI_TERMS, _LAMBDA_TERMS)


class CoefficientError(ValueError):
    pass


def _monomial_name(exps: Sequence[int]) -> str:
    parts = []
    for name, e in zip(SPECIES, exps):
        if e == 1:
            parts.append(name)
        elif e > 1:
            parts.append(f"{name}^{e}")
    return "*".join(parts) or "1"


def _eval_terms(terms, y) -> np.ndarray:
    return np.array([math.prod(v**e for v, e in zip(y, ex)) for ex in terms])


@dataclass(frozen=True)
class ReducedCoefficients:
    theta: tuple[float, ...]
    phi: tuple[float, ...]
    lam: tuple[float, ...]

    def __post_init__(self):
        for name, n in (("theta", 5), ("phi", 4), ("lam", 4)):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != n:
                raise ValueError(f"{name} needs {n} entries, got {len(v)}")
            if not all(math.isfinite(x) for x in v):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, v)

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> ReducedCoefficients:
        v = list(v)
        if len(v) != 13:
            raise ValueError("expected 13 coefficients")
        return cls(v[:5], v[5:9], v[9:])

    def as_vector(self) -> np.ndarray:
        return np.array(self.theta + self.phi + self.lam)

    def terms(self, y: Sequence[float]) -> list[np.ndarray]:
        """Individual right-hand-side terms of each equation at ``y``."""
        coeffs = (self.theta, self.phi, self.lam)
        return [np.asarray(c) * _eval_terms(t, y) for c, t in zip(coeffs, _TERMS)]

    def rhs(self, y: Sequence[float]) -> np.ndarray:
        return np.array([t.sum() for t in self.terms(y)])

    def scaled_residual(self, y: Sequence[float]) -> float:
        """Largest equation residual, each scaled by max(1, |largest term|)."""
        out = 0.0
        for t in self.terms(y):
            scale = max(1.0, float(np.max(np.abs(t))))
            out = max(out, abs(float(t.sum())) / scale)
        return out


def rhs_monomials(system: ReactionSystem) -> list[dict[tuple[int, ...], float]]:
    """Per-species map from monomial exponents to coefficient under mass action."""
    nu = system.stoichiometry
    k = system.rates
    out: list[dict[tuple[int, ...], float]] = [dict() for _ in range(len(system.species))]
    for j, r in enumerate(system):
        exps = tuple(r.reactants)
        factor = 0.5 if max(exps) == 2 else 1.0
        for s in range(len(system.species)):
            if nu[s, j] != 0:
                out[s][exps] = out[s].get(exps, 0.0) + nu[s, j] * k[j] * factor
    return out


def extract_coefficients(model, rtol: float = 1e-12) -> ReducedCoefficients:
    """Read the 13 reduced coefficients off a C/H/I mass-action model.

    Accepts a rated :class:`ReactionSystem` or anything with a ``system``
    attribute. Monomials outside the reduced form raise
    :class:`CoefficientError` naming them.
    """
    system = model if isinstance(model, ReactionSystem) else model.system
    names = system.species.names
    if set(names) != set(SPECIES) or len(names) != 3:
        raise CoefficientError(f"expected species {SPECIES}, got {names}")
    perm = [names.index(s) for s in SPECIES]
    mono = rhs_monomials(system)
    scale = max((abs(v) for eq in mono for v in eq.values()), default=0.0)
    result, extra = [], []
    for name, terms in zip(SPECIES, _TERMS):
        eq = {tuple(ex[p] for p in perm): v for ex, v in mono[names.index(name)].items()}
        result.append([eq.pop(t, 0.0) for t in terms])
        extra += [f"{name}': {_monomial_name(ex)}" for ex, v in eq.items() if abs(v) > rtol * scale]
    if extra:
        raise CoefficientError("monomials outside the reduced form: " + ", ".join(sorted(extra)))
    return ReducedCoefficients(*result)


@dataclass(frozen=True)
class QuarticCoefficients:
    alpha: tuple[float, float, float]
    beta: tuple[float, float]
    E: tuple[float, float, float, float, float]  # E0 .. E4

    def R(self, C):
        a1, a2, a3 = self.alpha
        return a1 + a2 * C + a3 * C * C

    def S(self, C):
        b1, b2 = self.beta
        return b1 + b2 * C

    def __call__(self, C):
        return np.polynomial.polynomial.polyval(C, self.E)


def quartic_coefficients(rc: ReducedCoefficients) -> QuarticCoefficients:
    t1, t2, t3, t4, t5 = rc.theta
    f1, f2, f3, f4 = rc.phi
    l1, l2, l3, l4 = rc.lam
    a1 = l1 * t1
    a2 = l1 * t3 + l4 * t1 - l2 * t2
    a3 = l4 * t3 - l2 * t5
    b1 = l3 * t2 - l1 * t4
    b2 = l3 * t5 - l4 * t4
    E4 = f4 * a3**2 + f3 * a3 * b2 + f2 * b2**2
    E3 = f1 * a3 * b2 + 2 * f2 * b1 * b2 + f3 * (a3 * b1 + a2 * b2) + 2 * f4 * a2 * a3
    E2 = f1 * (a3 * b1 + a2 * b2) + f2 * b1**2 + f3 * (a1 * b2 + a2 * b1) + f4 * (2 * a1 * a3 + a2**2)
    E1 = f1 * (a1 * b2 + a2 * b1) + f3 * a1 * b1 + 2 * f4 * a1 * a2
    E0 = f1 * a1 * b1 + f4 * a1**2
    return QuarticCoefficients((a1, a2, a3), (b1, b2), (E0, E1, E2, E3, E4))


def eliminated_form(rc: ReducedCoefficients, C: float) -> float:
    """phi1 R S + phi2 C^2 S^2 + phi3 C R S + phi4 R^2, evaluated directly."""
    q = quartic_coefficients(rc)
    f1, f2, f3, f4 = rc.phi
    R, S = q.R(C), q.S(C)
    return f1 * R * S + f2 * C * C * S * S + f3 * C * R * S + f4 * R * R


@dataclass
class Roots:
    roots: np.ndarray  # complex
    residuals: np.ndarray  # |p(root)|
    degree: int


def _aberth(c: np.ndarray, max_iter: int = 500) -> np.ndarray:
    """All roots of the polynomial with ascending coefficients ``c`` (c[-1] != 0)."""
    n = c.size - 1
    monic = c / c[-1]
    # Fujiwara-type bound for the initial circle
    radius = 2 * max(abs(monic[n - k]) ** (1.0 / k) for k in range(1, n + 1))
    radius = max(radius, 1e-300)
    z = radius * np.exp(1j * (2 * np.pi * np.arange(n) / n + 0.4))
    dc = np.polynomial.polynomial.polyder(c)
    for _ in range(max_iter):
        p = np.polynomial.polynomial.polyval(z, c)
        dp = np.polynomial.polynomial.polyval(z, dc)
        done = np.abs(p) == 0
        ratio = np.where(done, 0.0, p / np.where(dp == 0, 1e-300, dp))
        diff = z[:, None] - z[None, :]
        np.fill_diagonal(diff, 1.0)
        inv = 1.0 / diff
        np.fill_diagonal(inv, 0.0)
        step = ratio / (1.0 - ratio * inv.sum(axis=1))
        z = z - step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(z))):
            break
    return z


def solve_quartic(E: Sequence[float], trim_rtol: float = 0.0) -> Roots:
    """Roots of ``E0 + E1 C + ... + E4 C^4`` after trimming leading zeros.

    Roots come from Aberth-Ehrlich simultaneous iteration and then receive one
    Newton correction each. Coefficients whose magnitude is at most
    ``trim_rtol`` times the largest are treated as zero when trimming.
    """
    c = np.asarray(E, dtype=float)
    if c.ndim != 1 or c.size == 0:
        raise ValueError("coefficients must be a non-empty vector")
    if not np.all(np.isfinite(c)):
        raise ValueError("coefficients must be finite")
    big = float(np.max(np.abs(c)))
    if big == 0:
        raise ValueError("polynomial is identically zero")
    nz = np.flatnonzero(np.abs(c) > trim_rtol * big)
    c = c[: nz[-1] + 1]
    # exact zero roots from vanishing low-order coefficients
    n_zero = int(nz[0])
    c_red = c[n_zero:]
    roots = np.zeros(n_zero, dtype=complex)
    if c_red.size == 2:
        roots = np.append(roots, -c_red[0] / c_red[1] + 0j)
    elif c_red.size > 2:
        roots = np.append(roots, _aberth(c_red))
    if roots.size:
        dc = np.polynomial.polynomial.polyder(c)
        p = np.polynomial.polynomial.polyval(roots, c)
        dp = np.polynomial.polynomial.polyval(roots, dc)
        ok = (dp != 0) & (roots != 0)
        roots[ok] = roots[ok] - p[ok] / dp[ok]
    order = np.lexsort((roots.imag, roots.real))
    roots = roots[order]
    res = np.abs(np.polynomial.polynomial.polyval(roots, c))
    return Roots(roots, res, c.size - 1)


@dataclass
class SteadyState:
    C: float
    H: float
    I: float
    residual: float
    admissible: bool
    p: float = math.nan
    q: float = math.nan
    S: float = math.nan

    @property
    def state(self) -> np.ndarray:
        return np.array([self.C, self.H, self.I])

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EquilibriumResult:
    states: list[SteadyState]  # admissible interior states
    candidates: list[SteadyState]  # every positive real root examined
    boundary: list[SteadyState]  # C = 0 branch
    quartic: QuarticCoefficients
    degenerate: bool = False
    notes: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(self.states)

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i: int) -> SteadyState:
        return self.states[i]


def is_real(z: complex, tol: float = 1e-8) -> bool:
    return abs(z.imag) < tol * (1 + abs(z.real))


def boundary_states(rc: ReducedCoefficients) -> tuple[list[SteadyState], list[str]]:
    """Non-negative equilibria with C = 0."""
    notes = []
    t2 = rc.theta[1]
    l1 = rc.lam[0]
    f1, f4 = rc.phi[0], rc.phi[3]
    if t2 == 0 and l1 == 0:
        notes.append("C = 0 branch: I is undetermined (theta2 = lambda1 = 0)")
    hs = [0.0]
    if f4 != 0 and -f1 / f4 > 0:
        hs.append(-f1 / f4)
    elif f4 == 0 and f1 == 0:
        notes.append("C = 0 branch: H is undetermined (phi1 = phi4 = 0)")
    out = []
    for h in hs:
        y = (0.0, h, 0.0)
        res = rc.scaled_residual(y)
        out.append(SteadyState(0.0, h, 0.0, res, False))
    return out, notes


def steady_states(rc: ReducedCoefficients, tol: float = 1e-8, imag_tol: float = 1e-8) -> EquilibriumResult:
    """Interior equilibria (C, H, I > 0) from the quartic reduction."""
    quartic = quartic_coefficients(rc)
    boundary, notes = boundary_states(rc)
    l1, l2, l3, l4 = rc.lam
    degenerate = False
    if l1 == 0 and l4 == 0:
        degenerate = True
        notes.append("q vanishes identically: the immune equation does not determine I")
    if quartic.beta == (0.0, 0.0):
        degenerate = True
        notes.append("S vanishes identically: H cannot be recovered from R/S")
    if not any(quartic.E):
        degenerate = True
        notes.append("quartic is identically zero")
    if degenerate:
        return EquilibriumResult([], [], boundary, quartic, True, notes)

    roots = solve_quartic(quartic.E).roots
    candidates = []
    for z in roots:
        if not is_real(z, imag_tol) or z.real <= 0:
            continue
        C = float(z.real)
        S = float(quartic.S(C))
        q = l1 + l4 * C
        if S == 0 or q == 0:
            continue
        H = float(quartic.R(C)) / S
        p = l3 * H + l2 * C
        I = -C * p / q
        res = rc.scaled_residual((C, H, I))
        ok = C > 0 and H > 0 and I > 0 and res < tol
        candidates.append(SteadyState(C, H, I, res, ok, p, q, S))
    states = [s for s in candidates if s.admissible]
    if len(states) > 1:
        msg = f"{len(states)} admissible equilibria found; expected a single one"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return EquilibriumResult(states, candidates, boundary, quartic, False, notes)


RELAX_SOLVER = SolverConfig(method="stiff", rtol=1e-10, atol=1e-12)


def relax(
    system: ReactionSystem, y0: Sequence[float], horizon: float = 1e4, solver: SolverConfig = RELAX_SOLVER
) -> np.ndarray:
    """State reached by integrating ``system`` from ``y0`` to ``horizon``."""
    sol = integrate(OdeProblem(system, np.asarray(y0, dtype=float), (0.0, horizon)), solver)
    return sol.states[-1]


@dataclass(frozen=True)
class LinearFit:
    intercept: float
    slope: float
    rss: float
    r_squared: float
    n: int

    def __call__(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)


def fit_line(points: Iterable[tuple[float, float]]) -> LinearFit:
    """Ordinary least-squares line through ``(x, y)`` pairs."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two (x, y) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.ptp(x) == 0:
        raise ValueError("all abscissae are equal")
    xm, ym = x.mean(), y.mean()
    slope = float(np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2))
    intercept = float(ym - slope * xm)
    rss = float(np.sum((y - intercept - slope * x) ** 2))
    tss = float(np.sum((y - ym) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    return LinearFit(intercept, slope, rss, r2, int(x.size))


def invert_target(fit: LinearFit, target: float) -> float:
    """Abscissa at which the fitted line reaches ``target``."""
    if fit.slope == 0:
        raise ZeroDivisionError("cannot invert a line with zero slope")
    return (target - fit.intercept) / fit.slope
