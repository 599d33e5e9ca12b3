import warnings

import numpy as np
import pytest
from scipy.optimize import fsolve

from oracles import companion_roots, expand_eliminated_form, hausdorff
from tumorsurrogate.equilibrium import (
    CoefficientError,
    LinearFit,
    ReducedCoefficients,
    eliminated_form,
    extract_coefficients,
    fit_line,
    invert_target,
    is_real,
    quartic_coefficients,
    relax,
    solve_quartic,
    steady_states,
)
from tumorsurrogate.reactions import ReactionSystem, generate_library

UNION = generate_library("three_species_union_12")

TABLE_HALF = [(0.2, 0.7313), (0.1, 0.8117), (0.05, 0.8364)]
TABLE_THREE_QUARTERS = [(0.2, 0.6763), (0.1, 0.7838), (0.05, 0.8319)]


def union_rc(k):
    return extract_coefficients(UNION.with_rates(k))


# -- coefficient extraction ---------------------------------------------------

def test_extract_all_ones():
    rc = union_rc(np.ones(12))
    assert rc.theta == (1, 2, -1.5, -2, 1)
    assert rc.phi == (1, 0.5, 0, -0.5)
    assert rc.lam == (-1, 0.5, 1, -1)


def test_extract_zero():
    assert np.all(union_rc(np.zeros(12)).as_vector() == 0)


def test_extract_matches_closed_form_mapping():
    k = np.random.default_rng(0).uniform(0, 2, 12)
    rc = union_rc(k)
    np.testing.assert_allclose(rc.theta, [k[0], k[2] + k[3], -(k[4] + k[5] + k[6]) / 2, -(k[7] + k[9]), k[10]])
    np.testing.assert_allclose(rc.phi, [k[1], k[5] / 2, k[7] - k[9], -k[11] / 2])
    np.testing.assert_allclose(rc.lam, [-k[2], k[6] / 2, k[8], -k[10]])


def test_reduced_form_reproduces_mass_action_rhs():
    rng = np.random.default_rng(1)
    for _ in range(20):
        sysm = UNION.with_rates(rng.uniform(0, 2, 12))
        rc = extract_coefficients(sysm)
        y = rng.uniform(0, 1, 3)
        np.testing.assert_allclose(rc.rhs(y), sysm.rhs(y), rtol=1e-12, atol=1e-14)


def test_extra_monomials_are_named():
    extra = ReactionSystem.from_strings(["C", "H", "I"], [("C -> 2C", 1.0), ("H + I -> 0", 0.3)])
    with pytest.raises(CoefficientError, match=r"H\*I"):
        extract_coefficients(extra)


def test_species_order_is_respected():
    permuted = ReactionSystem.from_strings(["I", "C", "H"], [(lbl, 1.0) for lbl in UNION.labels()])
    assert extract_coefficients(permuted) == union_rc(np.ones(12))


# -- quartic ----------------------------------------------------------------

def test_quartic_collapses_to_r_squared():
    rng = np.random.default_rng(2)
    rc = ReducedCoefficients(rng.normal(size=5), (0, 0, 0, 1), rng.normal(size=4))
    q = quartic_coefficients(rc)
    a1, a2, a3 = q.alpha
    r2 = np.polynomial.polynomial.polymul([a1, a2, a3], [a1, a2, a3])
    np.testing.assert_allclose(q.E, r2, rtol=1e-12, atol=1e-14)


def test_quartic_vanishes_without_immune_coupling():
    rng = np.random.default_rng(3)
    q = quartic_coefficients(ReducedCoefficients(rng.normal(size=5), rng.normal(size=4), (0, 0, 0, 0)))
    assert q.alpha == (0, 0, 0) and q.beta == (0, 0) and not any(q.E)


def test_quartic_matches_polynomial_expansion_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        rc = ReducedCoefficients.from_vector(rng.normal(size=13))
        E = np.array(quartic_coefficients(rc).E)
        np.testing.assert_allclose(E, expand_eliminated_form(rc), rtol=1e-10, atol=1e-12)


def test_quartic_equals_direct_evaluation():
    rng = np.random.default_rng(5)
    for _ in range(100):
        rc = union_rc(rng.uniform(0, 2, 12))
        q = quartic_coefficients(rc)
        for C in rng.uniform(0, 3, 5):
            direct = eliminated_form(rc, C)
            assert abs(q(C) - direct) <= 1e-10 * max(1.0, abs(direct))


# -- root finding -----------------------------------------------------------

def test_roots_of_constructed_factorisation():
    E = np.polynomial.polynomial.polyfromroots([1, 2, 3, 4])
    roots = solve_quartic(E).roots
    np.testing.assert_allclose(np.sort(roots.real), [1, 2, 3, 4], atol=1e-10)
    assert np.all(np.abs(roots.imag) < 1e-10)


def test_leading_zero_trim():
    r = solve_quartic([0, 0, 0, 1, 0])
    assert r.degree == 3
    np.testing.assert_allclose(r.roots, 0)
    r = solve_quartic([6, -5, 1, 0, 0])
    assert r.degree == 2
    np.testing.assert_allclose(np.sort(r.roots.real), [2, 3])
    assert solve_quartic([2, 0, 0, 0, 0]).roots.size == 0


def test_zero_polynomial():
    with pytest.raises(ValueError):
        solve_quartic([0, 0, 0, 0, 0])


def test_roots_match_companion_oracle():
    rng = np.random.default_rng(6)
    for _ in range(200):
        E = rng.normal(size=5)
        r = solve_quartic(E)
        assert hausdorff(r.roots, companion_roots(E)) < 1e-8
        assert np.all(r.residuals < 1e-10 * np.abs(E).sum() * (1 + np.abs(r.roots)) ** 4)


def test_complex_roots():
    roots = solve_quartic([1, 0, 1, 0, 0]).roots  # 1 + C^2
    np.testing.assert_allclose(sorted(roots.imag), [-1, 1], atol=1e-12)
    assert not any(is_real(z) for z in roots)


# -- steady states ----------------------------------------------------------

def test_random_union_states_close_algebraically():
    rng = np.random.default_rng(7)
    for _ in range(100):
        rc = union_rc(rng.uniform(0, 2, 12))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = steady_states(rc)
        for s in res:
            assert s.C > 0 and s.H > 0 and s.I > 0
            assert s.residual < 1e-8
            assert rc.scaled_residual(s.state) < 1e-8


def test_newton_search_finds_nothing_extra():
    rng = np.random.default_rng(8)
    for _ in range(10):
        rc = union_rc(rng.uniform(0.1, 2, 12))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            found = [s.state for s in steady_states(rc).candidates]
        for y0 in rng.uniform(0.01, 3, (100, 3)):
            y, info, ok, _ = fsolve(rc.rhs, y0, full_output=True)
            if ok != 1 or np.any(y <= 1e-6) or rc.scaled_residual(y) > 1e-10:
                continue
            assert any(np.allclose(y, f, rtol=1e-5, atol=1e-7) for f in found), y


def test_immune_decoupled_is_degenerate():
    rng = np.random.default_rng(9)
    rc = ReducedCoefficients(rng.uniform(size=5), rng.uniform(size=4), (0, 0, 0, 0))
    res = steady_states(rc)
    assert res.degenerate and len(res) == 0


def test_boundary_branch_reported_separately():
    rc = union_rc(np.ones(12))
    res = steady_states(rc)
    hs = sorted(s.H for s in res.boundary)
    assert hs == [0.0, 2.0]  # H = -phi1 / phi4
    assert all(s.C == 0 for s in res.boundary)


def test_multiple_admissible_states_warn():
    # scan random union rates for a case with two interior equilibria
    rng = np.random.default_rng(10)
    for _ in range(5000):
        rc = union_rc(rng.uniform(0, 2, 12))
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            res = steady_states(rc)
        if len(res) > 1:
            assert any("admissible" in str(w.message) for w in rec)
            assert res.notes
            return
    pytest.skip("no multi-root instance in the sample")


def test_steady_state_matches_long_integration():
    k = np.array([1.2, 0.4, 0.3, 0.2, 1.5, 0.3, 0.4, 0.6, 0.5, 0.3, 0.8, 1.0])
    sysm = UNION.with_rates(k)
    res = steady_states(extract_coefficients(sysm))
    assert len(res) == 1
    y = relax(sysm, [1e-4, 0.3, 0.1], horizon=2000)
    np.testing.assert_allclose(y, res[0].state, atol=1e-4)


# -- linear fits ------------------------------------------------------------

def test_fit_line_on_reference_equilibria():
    f = fit_line(TABLE_HALF)
    assert f.intercept == pytest.approx(0.8766, abs=1e-3)
    assert f.slope == pytest.approx(-0.7154, abs=1e-3)
    assert invert_target(f, 0.2) == pytest.approx(0.9457, abs=1e-3)
    g = fit_line(TABLE_THREE_QUARTERS)
    assert g.intercept == pytest.approx(0.8857, abs=1e-3)
    assert g.slope == pytest.approx(-1.0427, abs=1e-3)
    assert invert_target(g, 0.2) == pytest.approx(0.6576, abs=1e-3)


def test_fit_line_exact_and_errors():
    f = fit_line([(0, 1), (2, 5)])
    assert (f.intercept, f.slope) == pytest.approx((1, 2))
    assert f.rss == pytest.approx(0, abs=1e-15)
    assert invert_target(f, f.intercept) == 0
    with pytest.raises(ValueError):
        fit_line([(1, 0), (1, 2)])
    with pytest.raises(ZeroDivisionError):
        invert_target(LinearFit(1.0, 0.0, 0.0, 1.0, 2), 0.5)


def test_fit_line_is_least_squares():
    pts = np.array(TABLE_THREE_QUARTERS)
    f = fit_line(pts)

    def rss(a, b):
        return float(np.sum((pts[:, 1] - a - b * pts[:, 0]) ** 2))

    for da in (-1e-3, 0, 1e-3):
        for db in (-1e-3, 0, 1e-3):
            assert rss(f.intercept + da, f.slope + db) >= f.rss - 1e-15
