"""Batch runs over the scenario grid: simulate, learn, analyse, plot data.

Every stage writes plain CSV/JSON under the run directory and registers what
it wrote; ``manifest.json`` is written last and lists each file with its
sha256 so a rerun can be checked byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .abm import AbmParams, GridConfig, ScenarioConfig, derive_seed, run_ensemble
from .config import read_toml
from .equilibrium import CoefficientError, extract_coefficients, fit_line, invert_target, relax, steady_states
from .learning import (
    SCORE_SOLVER,
    STRIDES,
    Candidate,
    LearnedModel,
    LearningConfig,
    learn_model,
    refine_rates,
    refit,
    resolve_library,
    safe_score,
    select_model,
    union_model,
)
from .odesim import IntegrationError, OdeProblem, integrate
from .reactions import ReactionSystem
from .series import EnsembleSeries

log = logging.getLogger(__name__)

DESK_REPLICATIONS = 20
FULL_REPLICATIONS = 100
STAGES = ("simulate", "learn", "analyze", "plot")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage} stage failed: {message}")
        self.stage = stage


class MissingArtifactsError(FileNotFoundError):
    def __init__(self, missing: Sequence[Path | str]):
        self.missing = [str(p) for p in missing]
        super().__init__("missing artifacts: " + ", ".join(self.missing))


def scenario_id(immune_fraction: float, competition: float) -> str:
    return f"I{immune_fraction:g}_C{competition:g}"


def default_sweep(
    libraries: Iterable[str] = ("complete", "constrained"),
    derivatives: Iterable[str] = ("central", "kalman"),
    strides: Iterable[int] = STRIDES,
    threshold: float = LearningConfig.prune_threshold,
) -> tuple[LearningConfig, ...]:
    return tuple(
        LearningConfig(stride=int(s), derivative_method=d, prune_threshold=float(threshold), library=lib)
        for lib in libraries
        for d in derivatives
        for s in strides
    )


@dataclass(frozen=True)
class AnalysisConfig:
    """Per-scenario refit on a fixed structure, then the equilibrium study."""

    library: str = "union12"
    stride: int = 10
    derivative_method: str = "central"
    refine: bool = True
    max_nfev: int = 40
    windows: int = 10
    targets: tuple[float, ...] = (0.2,)
    relax_horizon: float = 1e4

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(float(t) for t in self.targets))
        if self.max_nfev < 1 or self.windows < 1:
            raise ValueError("max_nfev and windows must be positive")


@dataclass(frozen=True)
class ExperimentPlan:
    immune_fractions: tuple[float, ...] = (0.05, 0.1, 0.2)
    immune_competitions: tuple[float, ...] = (0.5, 0.75)
    learning: tuple[LearningConfig, ...] = field(default_factory=default_sweep)
    out_dir: Path = Path("run")
    master_seed: int = 0
    replications: int = DESK_REPLICATIONS
    grid: GridConfig = field(default_factory=GridConfig)
    params: AbmParams = field(default_factory=AbmParams)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    selection_tolerance: float = 0.10
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "immune_fractions", tuple(float(x) for x in self.immune_fractions))
        object.__setattr__(self, "immune_competitions", tuple(float(x) for x in self.immune_competitions))
        object.__setattr__(self, "learning", tuple(self.learning))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        ids = self.scenario_ids()
        if not ids:
            raise ValueError("the scenario grid is empty")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate scenario identifiers in {ids}")
        if not self.learning:
            raise ValueError("at least one learning configuration is required")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master seed must be an unsigned 64-bit integer")

    def grid_points(self) -> list[tuple[float, float]]:
        return [(i0, ci) for ci in self.immune_competitions for i0 in self.immune_fractions]

    def scenario_ids(self) -> list[str]:
        return [scenario_id(i0, ci) for i0, ci in self.grid_points()]

    def scenarios(self) -> list[ScenarioConfig]:
        out = []
        for i0, ci in self.grid_points():
            sid = scenario_id(i0, ci)
            params = replace(self.params, initial_immune_fraction=i0, immune_competition=ci)
            out.append(ScenarioConfig(self.grid, params, self.replications, derive_seed(self.master_seed, sid), sid))
        return out

    def to_dict(self) -> dict:
        params = asdict(self.params)
        params.pop("initial_immune_fraction")
        params.pop("immune_competition")
        return {
            "seed": self.master_seed,
            "replications": self.replications,
            "out": str(self.out_dir),
            "plan": {
                "immune_fractions": list(self.immune_fractions),
                "immune_competitions": list(self.immune_competitions),
                "selection_tolerance": self.selection_tolerance,
                "workers": self.workers,
            },
            "grid": asdict(self.grid),
            "params": params,
            "learning": {"configs": [asdict(c) for c in self.learning]},
            "analysis": {**asdict(self.analysis), "targets": list(self.analysis.targets)},
        }

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentPlan:
        _check_keys(data, {"seed", "replications", "out", "plan", "grid", "params", "learning", "analysis"}, "top level")
        plan = data.get("plan", {})
        _check_keys(plan, {"immune_fractions", "immune_competitions", "selection_tolerance", "workers"}, "plan")
        grid = data.get("grid", {})
        _check_keys(grid, _names(GridConfig), "grid")
        params = data.get("params", {})
        _check_keys(params, _names(AbmParams), "params")
        analysis = data.get("analysis", {})
        _check_keys(analysis, _names(AnalysisConfig), "analysis")
        kwargs = {}
        for key, name in (("seed", "master_seed"), ("replications", "replications"), ("out", "out_dir")):
            if key in data:
                kwargs[name] = data[key]
        for key in ("immune_fractions", "immune_competitions", "selection_tolerance", "workers"):
            if key in plan:
                kwargs[key] = plan[key]
        return cls(
            grid=GridConfig(**grid),
            params=AbmParams(**params),
            analysis=AnalysisConfig(**analysis),
            learning=_learning_from_dict(data.get("learning", {})),
            **kwargs,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentPlan:
        """TOML plan, or the ``config`` block of an earlier run's manifest."""
        path = Path(path)
        if path.suffix == ".json":
            return cls.from_dict(json.loads(path.read_text())["config"])
        return cls.from_dict(read_toml(path))


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _check_keys(data: dict, known: set[str], section: str) -> None:
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {section} keys: {sorted(unknown)}")


def _learning_from_dict(data: dict) -> tuple[LearningConfig, ...]:
    """Either an explicit ``configs`` list or a sweep over the listed axes."""
    _check_keys(data, {"configs", "libraries", "derivatives", "strides", "threshold"}, "learning")
    if "configs" in data:
        if len(data) > 1:
            raise ValueError("learning: give either 'configs' or sweep axes, not both")
        return tuple(LearningConfig(**c) for c in data["configs"])
    sweep = {}
    for key in ("libraries", "derivatives", "strides", "threshold"):
        if key in data:
            sweep[key] = data[key]
    return default_sweep(**sweep)


# -- artifacts ---------------------------------------------------------------

def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _clean(x):
    """Floats that JSON can carry: non-finite values become null."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


class Recorder:
    """Writes files under the run directory and remembers them per stage."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.stages: dict[str, dict] = {}
        self.current: str | None = None

    def begin(self, stage: str) -> None:
        self.current = stage
        self.stages[stage] = {"status": "running", "artifacts": [], "seconds": 0.0}

    def end(self, stage: str, started: float, status: str = "ok", error: str | None = None) -> None:
        entry = self.stages[stage]
        entry["status"] = status
        entry["seconds"] = round(time.perf_counter() - started, 3)
        if error:
            entry["error"] = error

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def register(self, rel: str) -> Path:
        arts = self.stages[self.current]["artifacts"]
        if rel not in arts:
            arts.append(rel)
        return self.root / rel

    def write_text(self, rel: str, text: str) -> Path:
        self.path(rel).write_text(text)
        return self.register(rel)

    def write_json(self, rel: str, obj) -> Path:
        return self.write_text(rel, _json_text(_clean(obj)))

    def save_model(self, rel: str, model: LearnedModel) -> Path:
        model.save(self.path(rel))
        self.register(rel)
        return self.register(rel[: -len(".json")] + ".meta.json")


@dataclass
class RunManifest:
    tool_version: str
    config: dict
    seeds: dict[str, int]
    stages: dict[str, dict]
    hashes: dict[str, str]
    status: str = "complete"
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))

    def artifacts(self) -> list[str]:
        return [a for s in self.stages.values() for a in s["artifacts"]]


def _build_manifest(plan: ExperimentPlan, rec: Recorder, status: str, error: str | None) -> RunManifest:
    hashes = {}
    for rel in (a for s in rec.stages.values() for a in s["artifacts"]):
        p = rec.root / rel
        if p.exists():
            hashes[rel] = sha256_file(p)
    seeds = {sc.scenario_id: sc.base_seed for sc in plan.scenarios()}
    return RunManifest(__version__, plan.to_dict(), seeds, rec.stages, hashes, status, error)


# -- stages ------------------------------------------------------------------

ENSEMBLE_DIR = "simulate"


def ensemble_path(sid: str) -> str:
    return f"{ENSEMBLE_DIR}/{sid}.csv"


def simulate_stage(plan: ExperimentPlan, rec: Recorder) -> dict[str, EnsembleSeries]:
    out = {}
    for sc in plan.scenarios():
        t0 = time.perf_counter()
        series = run_ensemble(sc, workers=plan.workers)
        rec.write_text(ensemble_path(sc.scenario_id), series.to_csv(with_extra=("escaped",)))
        log.info("simulated %s (%d replications) in %.1fs", sc.scenario_id, sc.replications, time.perf_counter() - t0)
        out[sc.scenario_id] = series
    return out


def load_ensembles(plan: ExperimentPlan) -> dict[str, EnsembleSeries]:
    root = plan.out_dir
    paths = {sid: root / ensemble_path(sid) for sid in plan.scenario_ids()}
    missing = [p for p in paths.values() if not p.exists()]
    if missing:
        raise MissingArtifactsError(missing)
    return {
        sid: EnsembleSeries.from_csv(p, species=("C", "H", "I"), replications=plan.replications, scenario_id=sid)
        for sid, p in paths.items()
    }


def _project(series: EnsembleSeries, species: Sequence[str]) -> EnsembleSeries:
    """Columns of ``series`` for the library's species (a two-species library drops I)."""
    if tuple(species) == series.species:
        return series
    missing = [s for s in species if s not in series.species]
    if missing:
        raise ValueError(f"series has no column for {missing}")
    idx = [series.species.index(s) for s in species]
    return EnsembleSeries(series.times, series.values[:, idx], tuple(species), series.replications, series.scenario_id)


def _score_total(scores: dict[str, np.ndarray]) -> float:
    vals = [float(np.mean(v)) for v in scores.values()]
    return float(np.mean(vals)) if vals and all(math.isfinite(v) for v in vals) else math.inf


def learn_stage(plan: ExperimentPlan, ensembles: dict[str, EnsembleSeries], rec: Recorder) -> Candidate:
    """Learn per scenario for every configuration, unite, refit, score, select."""
    candidates = []
    for cfg in plan.learning:
        lib = resolve_library(cfg.library)
        base = f"learn/{cfg.label}"
        data = {sid: _project(s, lib.species.names) for sid, s in ensembles.items()}
        models = [learn_model(lib, s, cfg) for s in data.values()]
        for m in models:
            rec.save_model(f"{base}/{m.scenario_id}.json", m)
        union = union_model(models)
        scores = {}
        if union.support:
            for sid, s in data.items():
                r = refit(union, s, cfg)
                rec.save_model(f"{base}/refit/{sid}.json", r)
                scores[sid] = safe_score(r, s)
        total = _score_total(scores) if scores else math.inf
        rec.write_json(f"{base}/scores.json", {
            "config": asdict(cfg),
            "union": {"support": list(union.support), "labels": union.labels(), "members": union.members},
            "rmse": {sid: v for sid, v in scores.items()},
            "score": total,
        })
        candidates.append(Candidate(cfg, len(union.support), total, payload=union))
        log.info("learned %s: union of %d reactions, score %.4g", cfg.label, len(union.support), total)
    try:
        chosen = select_model(candidates, plan.selection_tolerance)
    except ValueError as exc:
        raise StageError("learn", str(exc)) from exc
    union = chosen.payload
    rec.write_text("learn/union.json", union.system.to_json())
    rec.write_json("learn/selection.json", {
        "tolerance": plan.selection_tolerance,
        "chosen": chosen.config.label,
        "chosen_config": asdict(chosen.config),
        "union_labels": union.labels(),
        "members": union.members,
        "candidates": [
            {"label": c.config.label, "support_size": c.support_size, "score": c.score} for c in candidates
        ],
    })
    return chosen


def _scenario_point(plan: ExperimentPlan) -> dict[str, tuple[float, float]]:
    return {scenario_id(i0, ci): (i0, ci) for i0, ci in plan.grid_points()}


def analyze_stage(plan: ExperimentPlan, ensembles: dict[str, EnsembleSeries], rec: Recorder) -> dict:
    """Refit the analysis structure per scenario, then steady states and line fits."""
    acfg = plan.analysis
    lib = resolve_library(acfg.library)
    lcfg = LearningConfig(stride=acfg.stride, derivative_method=acfg.derivative_method, library=acfg.library)
    points = _scenario_point(plan)
    reports, scores = [], {}
    for sid, series in ensembles.items():
        i0, ci = points[sid]
        nnls_fit = refit(lib, series, lcfg)
        rec.save_model(f"analyze/nnls/{sid}.json", nnls_fit)
        scores[sid] = {"nnls": safe_score(nnls_fit, series)}
        model, model_rel = nnls_fit, f"analyze/nnls/{sid}.json"
        if acfg.refine:
            model = refine_rates(nnls_fit, series, max_nfev=acfg.max_nfev, windows=acfg.windows)
            model_rel = f"analyze/refined/{sid}.json"
            rec.save_model(model_rel, model)
            scores[sid]["refined"] = safe_score(model, series)
        try:
            rc = extract_coefficients(model)
        except CoefficientError as exc:
            raise StageError("analyze", f"{acfg.library} has no reduced steady-state form: {exc}") from exc
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = steady_states(rc)
        try:
            relaxed = relax(model.system, series.initial_state, acfg.relax_horizon)
        except IntegrationError:
            relaxed = np.full(3, np.nan)
        entry = {
            "scenario": sid, "C_I": ci, "I0": i0, "C": None, "H": None, "I": None, "residual": None,
            "quartic": list(res.quartic.E), "admissible_count": len(res),
            "states": [s.state.tolist() for s in res], "relaxed": relaxed.tolist(), "relax_gap": None,
            "degenerate": res.degenerate, "notes": res.notes, "model": model_rel,
        }
        if len(res):
            s = res[0]
            entry.update(C=s.C, H=s.H, I=s.I, residual=s.residual)
            entry["relax_gap"] = float(np.max(np.abs(relaxed - s.state)))
        reports.append(entry)
        log.info("analysed %s: %d admissible state(s)", sid, len(res))
    rec.write_json("analyze/scores.json", scores)
    rec.write_json("analyze/steady_states.json", reports)
    fits = linear_fits(reports, acfg.targets)
    rec.write_json("analyze/fits.json", fits)
    rec.write_text("analyze/table.csv", table_csv(reports))
    return {"reports": reports, "fits": fits, "scores": scores}


def linear_fits(reports: Sequence[dict], targets: Sequence[float]) -> dict:
    """Steady C against I0, one least-squares line per C_I."""
    by_ci: dict[float, list[tuple[float, float]]] = {}
    for r in reports:
        by_ci.setdefault(r["C_I"], [])
        if r["C"] is not None:
            by_ci[r["C_I"]].append((r["I0"], r["C"]))
    out = {}
    for ci, pts in sorted(by_ci.items()):
        key = f"{ci:g}"
        if len({x for x, _ in pts}) < 2:
            out[key] = {"intercept": None, "slope": None, "r_squared": None, "points": pts,
                        "inverted_targets": {f"{t:g}": None for t in targets}}
            continue
        fit = fit_line(pts)
        inverted = {}
        for t in targets:
            try:
                inverted[f"{t:g}"] = invert_target(fit, t)
            except ZeroDivisionError:
                inverted[f"{t:g}"] = None
        out[key] = {"intercept": fit.intercept, "slope": fit.slope, "r_squared": fit.r_squared,
                    "points": pts, "inverted_targets": inverted}
    return out


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    return buf.getvalue()


def table_csv(reports: Sequence[dict]) -> str:
    rows = [(r["scenario"], r["C_I"], r["I0"], r["C"], r["H"], r["I"]) for r in reports]
    return _csv_text(("scenario", "C_I", "I0", "C", "H", "I"), rows)


# -- plot data ---------------------------------------------------------------

def emit_plot_data(root: str | Path, rec: Recorder | None = None) -> list[Path]:
    """Plot-ready CSVs for the trajectory, model-fit and trend figures."""
    root = Path(root)
    report_path = root / "analyze/steady_states.json"
    fits_path = root / "analyze/fits.json"
    missing = [p for p in (report_path, fits_path) if not p.exists()]
    if missing:
        raise MissingArtifactsError(missing)
    reports = json.loads(report_path.read_text())
    fits = json.loads(fits_path.read_text())
    if not reports:
        warnings.warn("no scenarios in the steady-state report; no plot data written", UserWarning, stacklevel=2)
        return []
    need = []
    for r in reports:
        need += [root / ensemble_path(r["scenario"]), root / r["model"]]
    missing = [p for p in need if not p.exists()]
    if missing:
        raise MissingArtifactsError(missing)
    if rec is None:
        rec = Recorder(root)
        rec.begin("plot")
    written = []
    series = {r["scenario"]: EnsembleSeries.from_csv(root / ensemble_path(r["scenario"]), species=("C", "H", "I"))
              for r in reports}

    first = next(iter(series.values()))
    header, cols = ["time"], [first.times]
    for sid, s in series.items():
        if s.times.shape != first.times.shape or np.any(s.times != first.times):
            raise ValueError(f"scenario {sid} is on a different time grid")
        for j, name in enumerate(s.species):
            header.append(f"{sid}_{name}")
            cols.append(s.values[:, j])
    written.append(rec.write_text("plots/fig3.csv", _csv_text(header, zip(*cols))))

    for r in reports:
        s = series[r["scenario"]]
        system = ReactionSystem.from_json(root / r["model"])
        try:
            sol = integrate(OdeProblem(system, s.initial_state, (s.times[0], s.times[-1])), SCORE_SOLVER, t_eval=s.times)
            model = sol.states
        except IntegrationError:
            model = np.full_like(s.values, np.nan)
        header, cols = ["time"], [s.times]
        for j, name in enumerate(s.species):
            header += [f"{name}_data", f"{name}_model", f"{name}_abs_error"]
            cols += [s.values[:, j], model[:, j], np.abs(model[:, j] - s.values[:, j])]
        written.append(rec.write_text(f"plots/fig6_{r['scenario']}.csv", _csv_text(header, zip(*cols))))

    for key, fit in fits.items():
        rows = sorted((r for r in reports if f"{r['C_I']:g}" == key), key=lambda r: r["I0"])
        out = []
        for r in rows:
            line = None if fit["intercept"] is None else fit["intercept"] + fit["slope"] * r["I0"]
            out.append((r["I0"], r["C"], line))
        written.append(rec.write_text(f"plots/fig7_CI{key}.csv", _csv_text(("I0", "steady_C", "fit_C"), out)))
    return written


# -- orchestration -----------------------------------------------------------

def run_pipeline(plan: ExperimentPlan, stages: Sequence[str] = STAGES) -> RunManifest:
    """Run the requested stages in order and write ``manifest.json`` last.

    Stages not run here but recorded in an existing manifest of the same run
    directory are carried over, so running the subcommands one by one ends
    with the same manifest as a single full run. A failing stage leaves its
    partial artifacts in place, marks the manifest failed and raises
    :class:`StageError`.
    """
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}")
    root = plan.out_dir
    root.mkdir(parents=True, exist_ok=True)
    rec = Recorder(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        try:
            previous = RunManifest.read(manifest_path)
        except (ValueError, TypeError, KeyError):
            previous = None
        if previous is not None and previous.config == plan.to_dict():
            for name in STAGES:
                if name in previous.stages and name not in stages:
                    rec.stages[name] = previous.stages[name]
    ensembles = None
    status, error = "complete", None
    try:
        for name in [s for s in STAGES if s in stages]:
            rec.begin(name)
            started = time.perf_counter()
            try:
                if name == "simulate":
                    ensembles = simulate_stage(plan, rec)
                elif name == "learn":
                    ensembles = ensembles or load_ensembles(plan)
                    learn_stage(plan, ensembles, rec)
                elif name == "analyze":
                    ensembles = ensembles or load_ensembles(plan)
                    analyze_stage(plan, ensembles, rec)
                else:
                    emit_plot_data(root, rec)
            except StageError as exc:
                rec.end(name, started, "failed", str(exc))
                raise
            except Exception as exc:  # any failure inside a stage aborts the run
                rec.end(name, started, "failed", f"{type(exc).__name__}: {exc}")
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
            rec.end(name, started)
    except StageError as exc:
        status, error = "failed", str(exc)
        raise
    finally:
        manifest = _build_manifest(plan, rec, status, error)
        manifest.write(manifest_path)
    return manifest
