"""Species, mass-action reactions and reaction libraries.

A reaction stores reactant and product counts as integer vectors aligned with
the species order of the system it belongs to. Under mass action the unit-rate
propensity of a reaction is

    order 0      -> 1
    X            -> x
    X + Y        -> x * y
    2X           -> x**2 / 2

and the right-hand side of the ODE is ``sum_j nu_j * k_j * a_j(y)``.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MAX_ORDER = 2


class ReactionError(ValueError):
    pass


class SpeciesSet:
    """Ordered, immutable collection of species labels."""

    __slots__ = ("_names", "_index")

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        if len(set(names)) != len(names):
            raise ReactionError(f"duplicate species labels in {names}")
        if not names:
            raise ReactionError("a species set needs at least one label")
        self._names = names
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ReactionError(f"unknown species {name!r}; known: {self._names}") from None

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SpeciesSet) and other._names == self._names

    def __hash__(self) -> int:
        return hash(self._names)

    def __repr__(self) -> str:
        return f"SpeciesSet({list(self._names)!r})"

    def counts(self, multiset: Mapping[str, int] | Sequence[str]) -> tuple[int, ...]:
        """Convert ``{"C": 2}`` or ``["C", "C"]`` to a count vector."""
        out = [0] * len(self)
        items = multiset.items() if isinstance(multiset, Mapping) else ((n, 1) for n in multiset)
        for name, n in items:
            if n < 0:
                raise ReactionError(f"negative count for {name!r}")
            out[self.index(name)] += int(n)
        return tuple(out)


@dataclass(frozen=True)
class Reaction:
    reactants: tuple[int, ...]
    products: tuple[int, ...]
    rate: float = 0.0

    def __post_init__(self):
        r = tuple(int(x) for x in self.reactants)
        p = tuple(int(x) for x in self.products)
        object.__setattr__(self, "reactants", r)
        object.__setattr__(self, "products", p)
        object.__setattr__(self, "rate", float(self.rate))
        if len(r) != len(p):
            raise ReactionError("reactant and product vectors differ in length")
        if min(r + p, default=0) < 0:
            raise ReactionError("stoichiometric counts must be non-negative")
        if sum(r) > MAX_ORDER:
            raise ReactionError(f"reaction order {sum(r)} exceeds {MAX_ORDER}")
        if not np.isfinite(self.rate) or self.rate < 0:
            raise ReactionError(f"rate must be finite and non-negative, got {self.rate}")
        if r == p:
            raise ReactionError("reaction has zero net change")

    @property
    def order(self) -> int:
        return sum(self.reactants)

    @property
    def key(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return self.reactants, self.products

    def with_rate(self, rate: float) -> Reaction:
        return replace(self, rate=rate)


def stoich_vector(reaction: Reaction) -> np.ndarray:
    """Net change ``products - reactants`` per species."""
    return np.subtract(reaction.products, reaction.reactants).astype(int)


def unit_propensity(reactants: Sequence[int], y: np.ndarray) -> np.ndarray:
    """Mass-action propensity with unit rate; ``y`` may carry leading batch axes."""
    y = np.asarray(y, dtype=float)
    out = np.ones(y.shape[:-1])
    for i, n in enumerate(reactants):
        if n == 1:
            out = out * y[..., i]
        elif n == 2:
            out = out * (0.5 * y[..., i] ** 2)
    return out


def propensity(reaction: Reaction, y: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    return float(reaction.rate * unit_propensity(reaction.reactants, y))


_TERM = re.compile(r"^\s*(\d*)\s*([A-Za-z_][A-Za-z_0-9]*)\s*$")


def _parse_side(text: str, species: SpeciesSet) -> tuple[int, ...]:
    text = text.strip()
    if text in ("", "0", "∅", "*0"):
        return (0,) * len(species)
    counts = [0] * len(species)
    for term in text.split("+"):
        m = _TERM.match(term)
        if not m:
            raise ReactionError(f"cannot parse term {term!r}")
        counts[species.index(m.group(2))] += int(m.group(1) or 1)
    return tuple(counts)


def parse_reaction(text: str, species: SpeciesSet, rate: float = 0.0) -> Reaction:
    """Parse ``"2C -> C + H"``; ``0`` denotes the empty complex."""
    lhs, sep, rhs = text.partition("->")
    if not sep:
        raise ReactionError(f"missing '->' in {text!r}")
    return Reaction(_parse_side(lhs, species), _parse_side(rhs, species), rate)


def _format_side(counts: Sequence[int], names: Sequence[str]) -> str:
    parts = []
    for n, name in zip(counts, names):
        if n == 1:
            parts.append(name)
        elif n > 1:
            parts.append(f"{n}{name}")
    return " + ".join(parts) if parts else "0"


class ReactionSystem:
    """Species set plus an ordered list of reactions with rate constants."""

    def __init__(self, species: SpeciesSet | Iterable[str], reactions: Iterable[Reaction] = ()):
        if not isinstance(species, SpeciesSet):
            species = SpeciesSet(species)
        self._species = species
        self._reactions = tuple(reactions)
        n = len(species)
        seen = set()
        for r in self._reactions:
            if len(r.reactants) != n:
                raise ReactionError(f"reaction spans {len(r.reactants)} species, system has {n}")
            if r.key in seen:
                raise ReactionError(f"duplicate reaction {self.format_reaction(r)}")
            seen.add(r.key)
        self._reactant_matrix = np.array([r.reactants for r in self._reactions], dtype=int).reshape(-1, n)
        self._nu = np.array([stoich_vector(r) for r in self._reactions], dtype=float).reshape(-1, n).T
        self._rates = np.array([r.rate for r in self._reactions], dtype=float)

    @classmethod
    def from_strings(cls, species: Iterable[str], reactions: Iterable[str | tuple[str, float]]) -> ReactionSystem:
        sp = SpeciesSet(species)
        out = []
        for item in reactions:
            text, rate = (item, 0.0) if isinstance(item, str) else item
            out.append(parse_reaction(text, sp, rate))
        return cls(sp, out)

    @property
    def species(self) -> SpeciesSet:
        return self._species

    @property
    def reactions(self) -> tuple[Reaction, ...]:
        return self._reactions

    @property
    def rates(self) -> np.ndarray:
        return self._rates.copy()

    @property
    def stoichiometry(self) -> np.ndarray:
        """Matrix of stoichiometric vectors, shape (n_species, n_reactions)."""
        return self._nu.copy()

    def __len__(self) -> int:
        return len(self._reactions)

    def __iter__(self):
        return iter(self._reactions)

    def __getitem__(self, j: int) -> Reaction:
        return self._reactions[j]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ReactionSystem)
            and other._species == self._species
            and other._reactions == self._reactions
        )

    def __repr__(self) -> str:
        return f"ReactionSystem({list(self._species.names)}, {len(self)} reactions)"

    def keys(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [r.key for r in self._reactions]

    def index_of(self, reaction: Reaction | str) -> int:
        if isinstance(reaction, str):
            reaction = parse_reaction(reaction, self._species)
        for j, r in enumerate(self._reactions):
            if r.key == reaction.key:
                return j
        raise KeyError(self.format_reaction(reaction))

    def format_reaction(self, r: Reaction) -> str:
        names = self._species.names
        return f"{_format_side(r.reactants, names)} -> {_format_side(r.products, names)}"

    def labels(self) -> list[str]:
        return [self.format_reaction(r) for r in self._reactions]

    def with_rates(self, rates: Sequence[float]) -> ReactionSystem:
        rates = np.asarray(rates, dtype=float)
        if rates.shape != (len(self),):
            raise ReactionError(f"expected {len(self)} rates, got shape {rates.shape}")
        return ReactionSystem(self._species, [r.with_rate(k) for r, k in zip(self._reactions, rates)])

    def subset(self, indices: Iterable[int]) -> ReactionSystem:
        return ReactionSystem(self._species, [self._reactions[j] for j in indices])

    def unit_propensities(self, y: np.ndarray) -> np.ndarray:
        """Unit-rate propensities, shape ``y.shape[:-1] + (n_reactions,)``."""
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != len(self._species):
            raise ReactionError(f"state has {y.shape[-1]} components, system has {len(self._species)} species")
        cols = [unit_propensity(row, y) for row in self._reactant_matrix]
        if not cols:
            return np.zeros(y.shape[:-1] + (0,))
        return np.stack(cols, axis=-1)

    def propensity_jacobian(self, y: np.ndarray) -> np.ndarray:
        """d a_j / d y_i for a single state, shape (n_reactions, n_species)."""
        y = np.asarray(y, dtype=float)
        J = np.zeros((len(self), len(self._species)))
        for j, row in enumerate(self._reactant_matrix):
            idx = np.flatnonzero(row)
            if len(idx) == 1 and row[idx[0]] == 2:
                J[j, idx[0]] = y[idx[0]]
            elif len(idx) == 1:
                J[j, idx[0]] = 1.0
            elif len(idx) == 2:
                J[j, idx[0]] = y[idx[1]]
                J[j, idx[1]] = y[idx[0]]
        return J

    def jacobian(self, y: np.ndarray, rates: np.ndarray | None = None) -> np.ndarray:
        """Jacobian of :meth:`rhs` with respect to the state."""
        k = self._rates if rates is None else np.asarray(rates, dtype=float)
        return self._nu @ (k[:, None] * self.propensity_jacobian(y))

    def rhs(self, y: np.ndarray, rates: np.ndarray | None = None) -> np.ndarray:
        k = self._rates if rates is None else np.asarray(rates, dtype=float)
        return self.unit_propensities(y) * k @ self._nu.T

    def to_dict(self) -> dict:
        names = self._species.names
        return {
            "species": list(names),
            "reactions": [
                {
                    "reactants": {n: c for n, c in zip(names, r.reactants) if c},
                    "products": {n: c for n, c in zip(names, r.products) if c},
                    "rate": r.rate,
                }
                for r in self._reactions
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> ReactionSystem:
        sp = SpeciesSet(data["species"])
        reactions = [
            Reaction(sp.counts(item.get("reactants", {})), sp.counts(item.get("products", {})), item.get("rate", 0.0))
            for item in data["reactions"]
        ]
        return cls(sp, reactions)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> ReactionSystem:
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            source = Path(source).read_text()
        return cls.from_dict(json.loads(source))


def mass_action_rhs(system: ReactionSystem, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ReactionError("mass_action_rhs expects a single state vector")
    return system.rhs(y)


# ---------------------------------------------------------------------------
# libraries

@dataclass(frozen=True)
class LibrarySpec:
    """How to build a candidate reaction library.

    ``mode="curated"`` returns a named preset. ``mode="generated"`` enumerates
    every reaction whose reactant order is in ``orders`` and whose net change
    satisfies ``|nu_i| <= per_species_cap`` and ``sum |nu_i| <= total_cap``.
    """

    mode: str = "generated"
    preset: str | None = None
    species: tuple[str, ...] = ("C", "H", "I")
    orders: tuple[int, ...] = (1, 2)
    per_species_cap: int = 1
    total_cap: int = 2
    forbidden_reactants: tuple[tuple[str, ...], ...] = ()
    forbidden_nu: tuple[tuple[int, ...], ...] = field(default=())

    def __post_init__(self):
        if self.mode not in ("curated", "generated"):
            raise ReactionError(f"unknown library mode {self.mode!r}")
        if self.mode == "curated" and not self.preset:
            raise ReactionError("curated mode needs a preset identifier")
        if any(o < 0 or o > MAX_ORDER for o in self.orders):
            raise ReactionError(f"orders must lie in 0..{MAX_ORDER}")
        if self.per_species_cap < 1 or self.total_cap < 1:
            raise ReactionError("stoichiometric caps must be positive")


def reactant_multisets(n_species: int, order: int) -> list[tuple[int, ...]]:
    """Count vectors of the given order, ascending by sorted species indices."""
    out = []
    for combo in itertools.combinations_with_replacement(range(n_species), order):
        counts = [0] * n_species
        for i in combo:
            counts[i] += 1
        out.append(tuple(counts))
    return out


def _generate(spec: LibrarySpec) -> ReactionSystem:
    sp = SpeciesSet(spec.species)
    n = len(sp)
    forbidden_r = {sp.counts(m) for m in spec.forbidden_reactants}
    forbidden_nu = {tuple(v) for v in spec.forbidden_nu}
    cap = spec.per_species_cap
    reactions = []
    for order in sorted(set(spec.orders)):
        for reactants in reactant_multisets(n, order):
            if reactants in forbidden_r:
                continue
            for nu in itertools.product(range(-cap, cap + 1), repeat=n):
                if not any(nu) or sum(map(abs, nu)) > spec.total_cap or nu in forbidden_nu:
                    continue
                products = tuple(a + b for a, b in zip(reactants, nu))
                if min(products) < 0:
                    continue
                reactions.append(Reaction(reactants, products, 0.0))
    return ReactionSystem(sp, reactions)


# Column order is the reference two-species library order k1..k17.
_TWO_SPECIES_17 = [
    "C -> 0", "H -> 0", "C -> H", "H -> C", "C -> 2C", "C -> C + H", "H -> 2H", "H -> H + C",
    "2C -> 0", "2H -> 0", "2C -> C", "2C -> H", "2H -> H", "2H -> C",
    "C + H -> 0", "C + H -> C", "C + H -> H",
]

# k0..k11 of the three-species union model.
UNION_12 = [
    "C -> 2C", "H -> 2H", "I -> C", "I -> I + C", "2C -> C", "2C -> C + H", "2C -> C + I",
    "C + H -> 2H", "C + H -> C + H + I", "C + H -> 0", "C + I -> 2C", "2H -> H",
]

DEFAULT_FORBIDDEN = (("I", "I"), ("H", "I"))

PRESETS = (
    "two_species_17",
    "three_species_union_12",
    "three_species_generated_default",
    "three_species_constrained_default",
)


def _preset(name: str) -> ReactionSystem:
    if name == "two_species_17":
        return ReactionSystem.from_strings(["C", "H"], _TWO_SPECIES_17)
    if name == "three_species_union_12":
        return ReactionSystem.from_strings(["C", "H", "I"], UNION_12)
    if name == "three_species_generated_default":
        return _generate(LibrarySpec())
    if name == "three_species_constrained_default":
        return constrain_library(_generate(LibrarySpec()), DEFAULT_FORBIDDEN)
    raise ReactionError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")


def generate_library(spec: LibrarySpec | str) -> ReactionSystem:
    """Build a library; a bare string is read as a curated preset id."""
    if isinstance(spec, str):
        spec = LibrarySpec(mode="curated", preset=spec)
    if spec.mode == "curated":
        return _preset(spec.preset)
    return _generate(spec)


def constrain_library(
    system: ReactionSystem, forbidden_reactants: Iterable[Mapping[str, int] | Sequence[str]]
) -> ReactionSystem:
    """Drop every reaction whose reactant multiset is listed in ``forbidden_reactants``."""
    sp = system.species
    banned = {sp.counts(m) for m in forbidden_reactants}
    return ReactionSystem(sp, [r for r in system if r.reactants not in banned])
