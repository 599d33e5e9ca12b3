import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorsurrogate.reactions import (
    DEFAULT_FORBIDDEN,
    LibrarySpec,
    Reaction,
    ReactionError,
    ReactionSystem,
    SpeciesSet,
    constrain_library,
    generate_library,
    mass_action_rhs,
    parse_reaction,
    propensity,
    stoich_vector,
)

CHI = SpeciesSet(["C", "H", "I"])


def rx(text, rate=0.0, species=CHI):
    return parse_reaction(text, species, rate)


# -- stoichiometry and propensities ------------------------------------------

@pytest.mark.parametrize(
    "text, nu",
    [("2C -> C + H", (-1, 1, 0)), ("C -> 2C", (1, 0, 0)), ("I -> I + C", (1, 0, 0))],
)
def test_stoich_vector(text, nu):
    assert tuple(stoich_vector(rx(text))) == nu


@pytest.mark.parametrize(
    "text, rate, y, expected",
    [
        ("2C -> C", 1.0, (2, 0, 0), 2.0),
        ("C + H -> 0", 2.0, (1, 3, 0), 6.0),
        ("C -> 2C", 0.5, (4, 0, 0), 2.0),
    ],
)
def test_propensity(text, rate, y, expected):
    assert propensity(rx(text, rate), np.array(y, float)) == pytest.approx(expected)


def test_reaction_validation():
    with pytest.raises(ReactionError):
        Reaction((3, 0, 0), (0, 0, 0))
    with pytest.raises(ReactionError):
        Reaction((1, 0, 0), (2, 0, 0), rate=-1.0)
    with pytest.raises(ReactionError):
        Reaction((1, 0, 0), (1, 0, 0))
    with pytest.raises(ReactionError):
        ReactionSystem(CHI, [rx("C -> 2C"), rx("C -> 2C", 1.0)])


def test_parse_round_trip():
    sysm = ReactionSystem.from_strings(["C", "H", "I"], ["C + H -> C + H + I", "2C -> 0", "I -> C"])
    assert sysm.labels() == ["C + H -> C + H + I", "2C -> 0", "I -> C"]


# -- right-hand side ----------------------------------------------------------

def test_rhs_empty_system():
    assert np.all(mass_action_rhs(ReactionSystem(CHI), np.array([1.0, 2.0, 3.0])) == 0)


def test_rhs_single_reaction():
    sysm = ReactionSystem(CHI, [rx("C + H -> 0", 2.0)])
    np.testing.assert_allclose(mass_action_rhs(sysm, np.array([1.0, 3.0, 0.0])), [-6, -6, 0])


def test_rhs_union_all_ones():
    union = generate_library("three_species_union_12").with_rates(np.ones(12))
    np.testing.assert_allclose(mass_action_rhs(union, np.ones(3)), [0.5, 1.0, -0.5])


def test_rhs_dimension_mismatch():
    with pytest.raises(ReactionError):
        mass_action_rhs(generate_library("three_species_union_12"), np.ones(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rhs_is_columnwise_linear(seed):
    rng = np.random.default_rng(seed)
    lib = generate_library("three_species_generated_default")
    pick = rng.choice(len(lib), size=8, replace=False)
    sysm = lib.subset(pick)
    k = rng.uniform(0, 3, len(sysm))
    y = rng.uniform(0, 2, 3)
    cols = np.column_stack([mass_action_rhs(sysm.subset([j]).with_rates([1.0]), y) for j in range(len(sysm))])
    np.testing.assert_allclose(mass_action_rhs(sysm.with_rates(k), y), cols @ k, rtol=1e-12, atol=1e-12)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    lib = generate_library("three_species_generated_default")
    sysm = lib.with_rates(rng.uniform(0, 1, len(lib)))
    y = rng.uniform(0.1, 1, 3)
    h = 1e-6
    fd = np.column_stack([(sysm.rhs(y + h * e) - sysm.rhs(y - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(sysm.jacobian(y), fd, rtol=1e-6, atol=1e-8)


# -- libraries ----------------------------------------------------------------

def _enumerate(n_species, per_cap=1, total_cap=2):
    """Brute-force oracle: all (reactants, products) pairs obeying the default rule."""
    out = set()
    for order in (1, 2):
        for r in itertools.product(range(3), repeat=n_species):
            if sum(r) != order:
                continue
            for p in itertools.product(range(4), repeat=n_species):
                nu = [b - a for a, b in zip(r, p)]
                if any(nu) and max(map(abs, nu)) <= per_cap and sum(map(abs, nu)) <= total_cap:
                    out.add((r, p))
    return out


def test_generated_library_matches_enumeration():
    lib = generate_library("three_species_generated_default")
    assert len(lib) == 93
    assert sum(r.order == 1 for r in lib) == 27
    assert sum(r.order == 2 for r in lib) == 66
    assert set(lib.keys()) == _enumerate(3)
    for r in lib:
        nu = stoich_vector(r)
        assert np.max(np.abs(nu)) <= 1 and np.sum(np.abs(nu)) <= 2


def test_generated_one_species():
    lib = generate_library(LibrarySpec(species=("X",)))
    assert lib.labels() == ["X -> 0", "X -> 2X", "2X -> X", "2X -> 3X"]


def test_generation_is_deterministic_and_ordered():
    a = generate_library(LibrarySpec())
    b = generate_library(LibrarySpec())
    assert a == b and a.labels() == b.labels()
    orders = [r.order for r in a]
    assert orders == sorted(orders)


def test_constrained_library():
    full = generate_library("three_species_generated_default")
    con = constrain_library(full, DEFAULT_FORBIDDEN)
    assert len(con) == 71
    removed = [r for r in full if r.key not in set(con.keys())]
    assert sum(r.reactants == (0, 0, 2) for r in removed) == 9
    assert sum(r.reactants == (0, 1, 1) for r in removed) == 13
    # survivors keep their relative order; re-applying is idempotent
    pos = [full.keys().index(k) for k in con.keys()]
    assert pos == sorted(pos)
    assert constrain_library(con, DEFAULT_FORBIDDEN) == con
    assert constrain_library(full, []) == full
    assert generate_library("three_species_constrained_default") == con


def test_constrain_two_species():
    lib = generate_library("two_species_17")
    out = constrain_library(lib, [("C", "H")])
    assert len(out) == 14
    assert out.labels() == lib.labels()[:14]


def test_union_contained_in_libraries():
    union = set(generate_library("three_species_union_12").keys())
    assert union <= set(generate_library("three_species_generated_default").keys())
    assert union <= set(generate_library("three_species_constrained_default").keys())


def test_unknown_preset():
    with pytest.raises(ReactionError):
        generate_library("no_such_library")


# Columns of the reference two-species library: (nu_C, nu_H) times a monomial,
# one per rate constant, in k1..k17 order.
_REFERENCE_17 = [
    lambda c, h: (-c, 0), lambda c, h: (0, -h), lambda c, h: (-c, c), lambda c, h: (h, -h),
    lambda c, h: (c, 0), lambda c, h: (0, c), lambda c, h: (0, h), lambda c, h: (h, 0),
    lambda c, h: (-c * c, 0), lambda c, h: (0, -h * h), lambda c, h: (-c * c / 2, 0),
    lambda c, h: (-c * c, c * c / 2), lambda c, h: (0, -h * h / 2), lambda c, h: (h * h / 2, -h * h),
    lambda c, h: (-c * h, -c * h), lambda c, h: (0, -c * h), lambda c, h: (-c * h, 0),
]


def test_two_species_17_columns_match_reference_library():
    lib = generate_library("two_species_17")
    assert len(lib) == 17
    rng = np.random.default_rng(0)
    for _ in range(5):
        c, h = rng.uniform(0.1, 2, 2)
        for j, col in enumerate(_REFERENCE_17):
            got = lib.subset([j]).with_rates([1.0]).rhs(np.array([c, h]))
            np.testing.assert_allclose(got, col(c, h), rtol=1e-14, err_msg=f"column k{j + 1}")


def test_json_round_trip(tmp_path):
    union = generate_library("three_species_union_12").with_rates(np.arange(12) / 10)
    path = tmp_path / "m.json"
    union.to_json(path)
    back = ReactionSystem.from_json(path)
    assert back == union
    data = json.loads(path.read_text())
    assert data["species"] == ["C", "H", "I"]
    assert data["reactions"][5] == {"reactants": {"C": 2}, "products": {"C": 1, "H": 1}, "rate": 0.5}
