import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorsurrogate.learning import (
    Candidate,
    LearnedModel,
    LearningConfig,
    build_design_matrix,
    learn_model,
    prune,
    refine_rates,
    refit,
    resolve_library,
    safe_score,
    score_model,
    select_model,
    subsample,
    union_model,
)
from tumorsurrogate.odesim import OdeProblem, SolverConfig, integrate
from tumorsurrogate.reactions import ReactionSystem, generate_library
from tumorsurrogate.series import EnsembleSeries

UNION = generate_library("three_species_union_12")
EXACT = SolverConfig(method="adaptive", rtol=1e-12, atol=1e-14)
THREE = ReactionSystem.from_strings(["C", "H", "I"], [("C -> 2C", 0.8), ("C + H -> 2H", 1.5), ("C + I -> 2C", 0.3)])


def synthetic(system, y0, dt=0.01, horizon=20.0):
    t = np.arange(int(round(horizon / dt)) + 1) * dt
    sol = integrate(OdeProblem(system, y0, (0, horizon)), EXACT, t_eval=t)
    return sol.to_series(scenario_id="synthetic")


def test_subsample_counts():
    s = EnsembleSeries(np.arange(2001) * 0.01, np.zeros((2001, 3)))
    assert subsample(s, 1) is s
    assert len(subsample(s, 10)) == 201
    assert len(subsample(s, 50)) == 41
    assert subsample(s, 10).times[1] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        subsample(s, 0)


def test_design_matrix_single_column():
    lib = ReactionSystem.from_strings(["C", "H", "I"], ["C -> 2C"])
    values = np.array([[1.0, 0, 0], [2.0, 0, 0]])
    A, b = build_design_matrix(lib, values, np.zeros_like(values))
    np.testing.assert_array_equal(A[:, 0], [1, 2, 0, 0, 0, 0])
    assert b.shape == (6,)


def test_design_matrix_shapes_and_errors():
    values = np.random.default_rng(0).uniform(size=(50, 3))
    A, b = build_design_matrix(UNION, values, values)
    assert A.shape == (150, 12) and b.shape == (150,)
    with pytest.raises(ValueError):
        build_design_matrix(UNION, values[:, :2], values[:, :2])
    with pytest.raises(ValueError):
        build_design_matrix(UNION, values, values[:10])


def test_true_rates_have_zero_residual():
    rng = np.random.default_rng(1)
    k = rng.uniform(0.1, 2, 12)
    values = rng.uniform(0, 1, (40, 3))
    derivs = np.array([UNION.rhs(y, k) for y in values])
    A, b = build_design_matrix(UNION, values, derivs)
    assert np.linalg.norm(A @ k - b) < 1e-12


def test_exact_derivatives_recover_support_and_rates():
    s = synthetic(THREE, [0.1, 0.4, 0.2], horizon=5.0)
    exact = np.array([THREE.rhs(y) for y in s.values])
    m = learn_model(UNION, s, LearningConfig(stride=10), derivatives=exact)
    want = {UNION.index_of(r): r.rate for r in THREE}
    assert set(m.support) == set(want)
    for j, k in want.items():
        assert m.rates[j] == pytest.approx(k, abs=1e-6)


def net_effect(system, rates):
    """Summed rate-weighted stoichiometry per reactant monomial."""
    out = {}
    for r, k in zip(system.reactions, rates):
        nu = np.subtract(r.products, r.reactants, dtype=float)
        out[r.reactants] = out.get(r.reactants, 0.0) + k * nu
    return {key: v for key, v in out.items() if np.any(v != 0)}


def test_large_library_recovers_net_effect():
    # reactions sharing a monomial are only identified through their net effect
    s = synthetic(THREE, [0.1, 0.4, 0.2], horizon=5.0)
    exact = np.array([THREE.rhs(y) for y in s.values])
    lib = resolve_library("constrained")
    m = learn_model(lib, s, LearningConfig(stride=10), derivatives=exact)
    got, want = net_effect(lib, m.rates), net_effect(THREE, THREE.rates)
    assert set(got) == set(want)
    for key in want:
        np.testing.assert_allclose(got[key], want[key], atol=1e-6)


def test_numerical_derivatives_stride_ten():
    s = synthetic(THREE, [0.1, 0.4, 0.2], horizon=5.0, dt=0.001)
    m = learn_model(THREE.with_rates(np.zeros(3)), s, LearningConfig(stride=10))
    np.testing.assert_allclose(m.rates, THREE.rates, rtol=0.05)


def test_all_zero_series():
    s = EnsembleSeries(np.arange(50) * 0.1, np.zeros((50, 3)))
    m = learn_model("constrained", s)
    assert m.support == () and not np.any(m.rates)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=6, max_size=6), st.floats(0, 1), st.floats(0, 1))
def test_prune_monotone_in_threshold(rates, t1, t2):
    rates = np.array(rates)
    lo, hi = sorted((t1, t2))
    assert set(prune(rates, hi)) <= set(prune(rates, lo))


def test_union_and_mismatch():
    lib = resolve_library("union12")
    a = LearnedModel(lib, np.eye(12)[1] + np.eye(12)[2], (1, 2), 0.0, scenario_id="a")
    b = LearnedModel(lib, np.eye(12)[2] + np.eye(12)[3], (2, 3), 0.0, scenario_id="b")
    u = union_model([a, b])
    assert u.support == (1, 2, 3)
    assert u.members == {"a": (1, 2), "b": (2, 3)}
    assert union_model([a] * 6).support == (1, 2)
    other = LearnedModel(resolve_library("constrained"), np.zeros(71), (), 0.0)
    with pytest.raises(ValueError):
        union_model([a, other])
    with pytest.raises(ValueError):
        union_model([])


def test_refit_residual_not_worse():
    rng = np.random.default_rng(2)
    s = synthetic(UNION.with_rates(rng.uniform(0.1, 1, 12)), [0.05, 0.3, 0.1], horizon=5.0)
    noisy = EnsembleSeries(s.times, s.values + rng.normal(scale=1e-4, size=s.values.shape))
    m = learn_model("constrained", noisy)
    r = refit(union_model([m]), noisy)
    assert r.residual <= m.residual + 1e-12


def test_refit_recovers_union_rates():
    k = np.array([1.2, 0.4, 0.3, 0.2, 1.5, 0.3, 0.4, 0.6, 0.5, 0.3, 0.8, 1.0])
    s = synthetic(UNION.with_rates(k), [0.05, 0.3, 0.1], horizon=10.0)
    exact = np.array([UNION.rhs(y, k) for y in s.values])
    r = refit(UNION, s, derivatives=exact)
    np.testing.assert_allclose(r.rates, k, rtol=1e-6)


def test_score_own_data_and_zero_model():
    s = synthetic(THREE, [0.1, 0.4, 0.2], horizon=5.0)
    assert np.all(score_model(THREE, s) < 1e-8)
    zero = ReactionSystem(["C", "H", "I"])
    expect = np.sqrt(np.mean((s.values - s.values[0]) ** 2, axis=0))
    np.testing.assert_allclose(score_model(zero, s), expect, rtol=1e-12)


def test_safe_score_maps_blowup_to_inf():
    blow = ReactionSystem.from_strings(["C", "H", "I"], [("2C -> 3C", 5.0)])
    s = EnsembleSeries(np.linspace(0, 5, 51), np.full((51, 3), 1.0))
    assert np.all(np.isinf(safe_score(blow, s)))


def test_select_smallest_within_tolerance():
    c = [
        Candidate(LearningConfig(stride=1), 20, 0.010),
        Candidate(LearningConfig(stride=10), 12, 0.0105),
        Candidate(LearningConfig(stride=20), 8, 0.02),
        Candidate(LearningConfig(stride=40), 3, float("inf")),
    ]
    assert select_model(c).support_size == 12
    assert select_model(c, tolerance=1.0).support_size == 8
    with pytest.raises(ValueError):
        select_model([Candidate(LearningConfig(), 3, float("inf"))])


def test_learning_config_validation():
    with pytest.raises(ValueError):
        LearningConfig(stride=0)
    with pytest.raises(ValueError):
        LearningConfig(prune_threshold=-1)
    with pytest.raises(ValueError):
        LearningConfig(derivative_method="spline")
    assert LearningConfig().label == "constrained-central-s10"


def test_model_save_round_trip(tmp_path):
    s = synthetic(THREE, [0.1, 0.4, 0.2], horizon=2.0)
    m = learn_model("union12", s, LearningConfig(library="union12"))
    m.save(tmp_path / "m.json")
    back = ReactionSystem.from_json(tmp_path / "m.json")
    assert back == m.system
    meta = json.loads((tmp_path / "m.meta.json").read_text())
    assert meta["config"]["stride"] == 10 and meta["support"] == list(m.support)


def test_refine_rates_improves_trajectory_fit():
    k = np.array([1.2, 0.4, 0.3, 0.2, 1.5, 0.3, 0.4, 0.6, 0.5, 0.3, 0.8, 1.0])
    s = synthetic(UNION.with_rates(k), [1e-3, 0.3, 0.1], dt=0.05, horizon=20.0)
    start = LearnedModel(UNION, k * np.random.default_rng(4).uniform(0.6, 1.4, 12), tuple(range(12)), 0.0)
    before = safe_score(start, s).max()
    r = refine_rates(start, s, max_nfev=40)
    after = safe_score(r, s).max()
    assert r.refined and r.support == start.support
    assert np.all(r.rates >= 0)
    assert after < before and after < 1e-3


def test_refine_rates_never_worse():
    k = np.array([1.2, 0.4, 0.3, 0.2, 1.5, 0.3, 0.4, 0.6, 0.5, 0.3, 0.8, 1.0])
    s = synthetic(UNION.with_rates(k), [1e-3, 0.3, 0.1], dt=0.05, horizon=20.0)
    exact = LearnedModel(UNION, k, tuple(range(12)), 0.0)
    r = refine_rates(exact, s, max_nfev=3)
    # refinement ranks candidates with its own integration (rtol 1e-7)
    assert safe_score(r, s).max() <= safe_score(exact, s).max() + 1e-6
