"""Time series of species densities shared by the simulator and the learner."""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class EnsembleSeries:
    """Densities on a time grid; ``values`` has shape (n_samples, n_species)."""

    times: np.ndarray
    values: np.ndarray
    species: tuple[str, ...] = ("C", "H", "I")
    replications: int = 1
    scenario_id: str = ""
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or values.shape[0] != times.size:
            raise ValueError(f"times {times.shape} and values {values.shape} disagree")
        if values.shape[1] != len(self.species):
            raise ValueError(f"{values.shape[1]} columns for species {self.species}")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "species", tuple(self.species))

    def __len__(self) -> int:
        return self.times.size

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.species.index(name)]

    @property
    def initial_state(self) -> np.ndarray:
        return self.values[0].copy()

    def uniform_step(self, rtol: float = 1e-6) -> float:
        """Grid spacing; raises if the grid is not uniform."""
        if len(self) < 2:
            raise ValueError("need at least two samples for a step size")
        d = np.diff(self.times)
        if np.max(np.abs(d - d[0])) > rtol * abs(d[0]) + 1e-12:
            raise ValueError("time grid is not uniform")
        return float(np.mean(d))

    def to_csv(self, path: str | Path | None = None, with_extra: bool | Sequence[str] = True) -> str:
        """Write ``time``, the species and the chosen ``extra`` columns.

        ``with_extra`` is True for every extra column, False for none, or a
        sequence of extra column names.
        """
        cols = ["time", *self.species]
        data = [self.times, *self.values.T]
        if with_extra is True:
            names = list(self.extra)
        elif with_extra is False:
            names = []
        else:
            names = list(with_extra)
        for k in names:
            cols.append(k)
            data.append(np.asarray(self.extra[k]))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in zip(*data):
            w.writerow([repr(float(x)) for x in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path, species: tuple[str, ...] | None = None, **kwargs) -> EnsembleSeries:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        if header[0] != "time":
            raise ValueError(f"{path}: first column must be 'time'")
        species = species or tuple(h for h in header[1:] if h != "escaped")
        idx = [header.index(s) for s in species]
        extra = {h: body[:, j] for j, h in enumerate(header) if j and h not in species}
        return cls(body[:, 0], body[:, idx], species=species, extra=extra, **kwargs)
