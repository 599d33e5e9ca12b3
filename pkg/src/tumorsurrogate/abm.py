"""Three-species stochastic lattice model of a tumour with an immune injection.

Cancer cells move, divide and compete; healthy cells divide a limited number
of times inside the inner region; immune cells are injected once into the
outer region when the cancer population first reaches a threshold and never
move. The boundary ring is a fence that cancer cells can degrade and escape
through.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import _kernel as K
from .config import read_toml
from .series import EnsembleSeries

log = logging.getLogger(__name__)

SPECIES = ("C", "H", "I")


@dataclass(frozen=True)
class GridConfig:
    width: int = 100
    height: int = 100
    inner_region_fraction: float = 0.64
    ecm_density: float = 0.1
    fence: bool = True

    def __post_init__(self):
        if self.width < 3 or self.height < 3:
            raise ValueError("lattice dimensions must be at least 3")
        for name in ("inner_region_fraction", "ecm_density"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def sites(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class AbmParams:
    jump_radius: int = 1
    cancer_move_prob: float = 0.005
    stickiness: float = 0.5
    cancer_division_prob: float = 0.3
    healthy_division_prob: float = 0.0002
    division_age: int = 5
    max_healthy_divisions: int = 2
    cancer_competition: float = 0.75
    immune_competition: float = 0.5
    ecm_breakdown_prob: float = 0.5
    fence_degrade_prob: float = 0.5
    injection_trigger: int = 500
    initial_healthy_density: float = 0.324
    initial_immune_fraction: float = 0.1
    dt: float = 0.01
    horizon: float = 20.0

    def __post_init__(self):
        probs = (
            "cancer_move_prob", "stickiness", "cancer_division_prob", "healthy_division_prob",
            "cancer_competition", "immune_competition", "ecm_breakdown_prob", "fence_degrade_prob",
            "initial_healthy_density", "initial_immune_fraction",
        )
        for name in probs:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.jump_radius < 1:
            raise ValueError("jump_radius must be a positive integer")
        if self.division_age < 1:
            raise ValueError("division_age must be at least one step")
        if self.max_healthy_divisions < 0 or self.injection_trigger < 0:
            raise ValueError("counts must be non-negative")
        if self.dt <= 0 or self.horizon <= 0:
            raise ValueError("dt and horizon must be positive")
        n = self.horizon / self.dt
        if abs(n - round(n)) > 1e-6 * n:
            raise ValueError("horizon must be an integer number of steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class ScenarioConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    params: AbmParams = field(default_factory=AbmParams)
    replications: int = 20
    base_seed: int = 0
    scenario_id: str = ""

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "replications": self.replications,
            "base_seed": self.base_seed,
            "grid": asdict(self.grid),
            "params": asdict(self.params),
        }

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioConfig:
        _check_keys(data.get("grid", {}), GridConfig, "grid")
        _check_keys(data.get("params", {}), AbmParams, "params")
        return cls(
            grid=GridConfig(**data.get("grid", {})),
            params=AbmParams(**data.get("params", {})),
            replications=int(data.get("replications", 20)),
            base_seed=int(data.get("base_seed", 0)),
            scenario_id=str(data.get("scenario_id", "")),
        )


def _check_keys(data: dict, cls, section: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown [{section}] keys: {sorted(unknown)}")


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Read a TOML scenario file with optional ``[grid]`` and ``[params]`` tables."""
    return ScenarioConfig.from_dict(read_toml(path))


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    text = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def inner_mask(grid: GridConfig) -> np.ndarray:
    """Centred square covering ``inner_region_fraction`` of the sites, fence excluded."""
    mask = np.zeros((grid.height, grid.width), dtype=bool)
    side_h = int(round(grid.height * math.sqrt(grid.inner_region_fraction)))
    side_w = int(round(grid.width * math.sqrt(grid.inner_region_fraction)))
    x0 = (grid.height - side_h) // 2
    y0 = (grid.width - side_w) // 2
    mask[x0:x0 + side_h, y0:y0 + side_w] = True
    if grid.fence:
        mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = False
    return mask


@dataclass
class GridState:
    """Mutable lattice state; every array is indexed by flat site id."""

    grid: GridConfig
    kind: np.ndarray
    age: np.ndarray
    divisions: np.ndarray
    stamp: np.ndarray
    inner: np.ndarray
    counts: np.ndarray  # C, H, I, escaped, injected flag, step index

    def copy(self) -> GridState:
        return GridState(
            self.grid, self.kind.copy(), self.age.copy(), self.divisions.copy(),
            self.stamp.copy(), self.inner, self.counts.copy(),
        )

    @property
    def n_cancer(self) -> int:
        return int(self.counts[K.N_C])

    @property
    def n_healthy(self) -> int:
        return int(self.counts[K.N_H])

    @property
    def n_immune(self) -> int:
        return int(self.counts[K.N_I])

    @property
    def escaped(self) -> int:
        return int(self.counts[K.N_ESC])

    @property
    def injected(self) -> bool:
        return bool(self.counts[K.N_INJECTED])

    @property
    def step_index(self) -> int:
        return int(self.counts[K.N_STEP])

    def lattice(self) -> np.ndarray:
        return self.kind.reshape(self.grid.height, self.grid.width)

    def recount(self) -> tuple[int, int, int]:
        return (
            int(np.count_nonzero(self.kind == K.CANCER)),
            int(np.count_nonzero(self.kind == K.HEALTHY)),
            int(np.count_nonzero(self.kind == K.IMMUNE)),
        )

    def densities(self) -> np.ndarray:
        return self.counts[:3] / self.grid.sites


def _vectors(params: AbmParams, grid: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    fp = np.zeros(9)
    fp[K.F_MOVE] = params.cancer_move_prob
    fp[K.F_STICK] = params.stickiness
    fp[K.F_DIV_C] = params.cancer_division_prob
    fp[K.F_DIV_H] = params.healthy_division_prob
    fp[K.F_CT] = params.cancer_competition
    fp[K.F_CI] = params.immune_competition
    fp[K.F_ECM] = params.ecm_breakdown_prob
    fp[K.F_FENCE] = params.fence_degrade_prob
    fp[K.F_IMMUNE] = params.initial_immune_fraction
    ip = np.zeros(5, dtype=np.int64)
    ip[K.I_RADIUS] = params.jump_radius
    ip[K.I_DIV_AGE] = params.division_age
    ip[K.I_MAX_HDIV] = params.max_healthy_divisions
    ip[K.I_TRIGGER] = params.injection_trigger
    ip[K.I_N_INJECT] = int(round(params.initial_immune_fraction * grid.sites))
    return fp, ip


def init_domain(grid: GridConfig, params: AbmParams, rng: np.random.Generator) -> GridState:
    """Healthy tissue in the inner region, random ECM, one transformed cell."""
    n = grid.sites
    kind = np.zeros(n, dtype=np.int8)
    inner = inner_mask(grid).ravel()
    if grid.fence:
        ring = np.zeros((grid.height, grid.width), dtype=bool)
        ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
        ring = ring.ravel()
        kind[ring] = K.FENCE
    else:
        ring = np.zeros(n, dtype=bool)

    inner_sites = np.flatnonzero(inner)
    n_healthy = int(round(params.initial_healthy_density * inner_sites.size))
    if n_healthy > inner_sites.size:
        raise ValueError("healthy density exceeds the inner region")
    healthy = rng.choice(inner_sites, size=n_healthy, replace=False) if n_healthy else np.empty(0, int)
    kind[healthy] = K.HEALTHY

    n_ecm = int(round(grid.ecm_density * np.count_nonzero(~ring)))
    free = np.flatnonzero((kind == K.EMPTY) & ~ring)
    if n_ecm > free.size:
        raise ValueError("ECM density exceeds the free sites")
    if n_ecm:
        kind[rng.choice(free, size=n_ecm, replace=False)] = K.ECM

    if n_healthy:
        seed_cell = healthy[rng.integers(n_healthy)]
    else:
        free_inner = np.flatnonzero((kind == K.EMPTY) & inner)
        if free_inner.size == 0:
            raise ValueError("no free inner site for the initial cancer cell")
        seed_cell = free_inner[rng.integers(free_inner.size)]
    kind[seed_cell] = K.CANCER

    counts = np.zeros(6, dtype=np.int64)
    counts[K.N_C] = 1
    counts[K.N_H] = np.count_nonzero(kind == K.HEALTHY)
    return GridState(
        grid, kind, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64),
        np.zeros(n, dtype=np.int64), inner, counts,
    )


def step(state: GridState, params: AbmParams, rng: np.random.Generator) -> GridState:
    """Return the state one ``dt`` later; the input state is left untouched."""
    new = state.copy()
    fp, ip = _vectors(params, state.grid)
    buf = np.empty(new.kind.size, dtype=np.int64)
    K.step_kernel(new.kind, new.age, new.divisions, new.stamp, new.inner, new.counts, fp, ip,
                  state.grid.width, rng, buf)
    return new


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    densities: np.ndarray  # (n_samples, 3)
    escaped: np.ndarray

    def to_series(self, scenario_id: str = "") -> EnsembleSeries:
        return EnsembleSeries(self.times, self.densities, species=SPECIES, scenario_id=scenario_id,
                              extra={"escaped": self.escaped.astype(float)})

    def to_csv(self, path=None) -> str:
        return self.to_series().to_csv(path)


def replication_rng(scenario: ScenarioConfig, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(scenario.base_seed, index)))


def run_replication(scenario: ScenarioConfig, index: int = 0) -> TrajectoryRecord:
    rng = replication_rng(scenario, index)
    state = init_domain(scenario.grid, scenario.params, rng)
    fp, ip = _vectors(scenario.params, scenario.grid)
    n_steps = scenario.params.n_steps
    counts = K.run_kernel(state.kind, state.age, state.divisions, state.stamp, state.inner, state.counts,
                          fp, ip, scenario.grid.width, rng, n_steps)
    times = np.arange(n_steps + 1) * scenario.params.dt
    return TrajectoryRecord(times, counts[:, :3] / scenario.grid.sites, counts[:, 3].copy())


def _run_one(args):
    scenario, index = args
    return run_replication(scenario, index)


def run_ensemble(scenario: ScenarioConfig, workers: int | None = 1) -> EnsembleSeries:
    """Pointwise mean over replications; identical for any worker count."""
    jobs = [(scenario, i) for i in range(scenario.replications)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]
    dens = np.stack([r.densities for r in records])
    esc = np.stack([r.escaped for r in records]).astype(float)
    extra = {"escaped": esc.mean(axis=0)}
    sd = dens.std(axis=0)
    for j, name in enumerate(SPECIES):
        extra[f"sd_{name}"] = sd[:, j]
    return EnsembleSeries(
        records[0].times, dens.mean(axis=0), species=SPECIES, replications=len(records),
        scenario_id=scenario.scenario_id, extra=extra,
    )


def with_params(scenario: ScenarioConfig, **changes) -> ScenarioConfig:
    return replace(scenario, params=replace(scenario.params, **changes))
