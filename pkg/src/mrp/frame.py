"""Demographic factors and the poststratification frame.

A frame is the table of demographic cells (one row per observed combination
of factor levels) with the number of people living in each cell.  Only
observed combinations are stored; missing combinations are not zero-filled.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

POPULATION_COLUMN = "population"


@dataclass(frozen=True)
class FactorSpec:
    """A categorical factor with an ordered set of level labels."""

    name: str
    levels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(lv) for lv in self.levels))
        if not self.name:
            raise DataError("factor name must be non-empty")
        if len(self.levels) == 0:
            raise DataError(f"factor {self.name!r} has an empty level list")
        if len(set(self.levels)) != len(self.levels):
            dupes = sorted({lv for lv in self.levels if self.levels.count(lv) > 1})
            raise DataError(f"factor {self.name!r} has duplicate levels: {dupes}")
        if len(self.levels) < 2:
            raise DataError(f"factor {self.name!r} needs at least 2 levels")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def index(self, label: str) -> int:
        try:
            return self.levels.index(label)
        except ValueError:
            raise DataError(
                f"unknown level {label!r} for factor {self.name!r}"
            ) from None


@dataclass(frozen=True)
class Cell:
    key: tuple[int, ...]
    population: int


def load_factor_specs(config) -> list[FactorSpec]:
    """Build factor specs from a parsed config document.

    Accepts either a list of ``{"name": ..., "levels": [...]}`` mappings or
    a mapping of ``name -> levels`` (insertion order is kept).
    """
    if isinstance(config, Mapping) and "factors" in config:
        config = config["factors"]
    if isinstance(config, Mapping):
        items = list(config.items())
    else:
        items = []
        for entry in config:
            if not isinstance(entry, Mapping) or "name" not in entry:
                raise DataError(f"malformed factor entry: {entry!r}")
            items.append((entry["name"], entry.get("levels")))
    specs = []
    seen = set()
    for name, levels in items:
        if name in seen:
            raise DataError(f"duplicate factor name {name!r}")
        seen.add(name)
        if not levels:
            raise DataError(f"factor {name!r} has an empty level list")
        specs.append(FactorSpec(str(name), tuple(levels)))
    return specs


@dataclass(frozen=True)
class GroupMap:
    """Assignment of frame cells to the levels of a factor interaction."""

    term: tuple[str, ...]
    cardinality: int
    assignment: np.ndarray

    def group_label(self, g: int, specs: Sequence[FactorSpec]) -> str:
        by_name = {s.name: s for s in specs}
        parts = []
        for name in reversed(self.term):
            n = by_name[name].n_levels
            parts.append(by_name[name].levels[g % n])
            g //= n
        return ":".join(reversed(parts))


def interaction_index(keys: np.ndarray, radices: Sequence[int]) -> np.ndarray:
    """Mixed-radix index of level tuples, first factor most significant."""
    keys = np.asarray(keys, dtype=np.int64)
    out = np.zeros(keys.shape[0], dtype=np.int64)
    for j, r in enumerate(radices):
        out = out * r + keys[:, j]
    return out


class Frame:
    """Immutable poststratification table.

    ``keys`` is an ``(n_cells, n_factors)`` integer array of level indices and
    ``population`` the matching ``int64`` cell counts.  Cells keep first-seen
    order from the input rows.
    """

    def __init__(self, factors: Sequence[FactorSpec], keys, population):
        self.factors = tuple(factors)
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, len(self.factors))
        population = np.asarray(population, dtype=np.int64).reshape(-1)
        if keys.shape[0] != population.shape[0]:
            raise DataError("keys and population lengths differ")
        for j, spec in enumerate(self.factors):
            col = keys[:, j]
            if col.size and (col.min() < 0 or col.max() >= spec.n_levels):
                raise DataError(f"level index out of range for factor {spec.name!r}")
        if population.size and population.min() < 0:
            raise DataError("negative population")
        self.keys = keys
        self.population = population
        self.keys.setflags(write=False)
        self.population.setflags(write=False)
        self.index = {tuple(int(v) for v in k): i for i, k in enumerate(keys)}
        if len(self.index) != len(keys):
            raise DataError("duplicate cell keys")

    def __len__(self):
        return self.keys.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.factors == other.factors
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.population, other.population)
        )

    @property
    def factor_names(self) -> list[str]:
        return [f.name for f in self.factors]

    @property
    def cells(self) -> list[Cell]:
        return [
            Cell(tuple(int(v) for v in k), int(n))
            for k, n in zip(self.keys, self.population)
        ]

    @property
    def total_population(self) -> int:
        return int(self.population.sum())

    def factor(self, name: str) -> FactorSpec:
        for f in self.factors:
            if f.name == name:
                return f
        raise DataError(f"unknown factor {name!r}")

    def factor_position(self, name: str) -> int:
        for j, f in enumerate(self.factors):
            if f.name == name:
                return j
        raise DataError(f"unknown factor {name!r}")

    def labels(self, i: int) -> tuple[str, ...]:
        return tuple(f.levels[k] for f, k in zip(self.factors, self.keys[i]))

    def column(self, name: str) -> np.ndarray:
        return self.keys[:, self.factor_position(name)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.factor_names + [POPULATION_COLUMN])
        for i in range(len(self)):
            w.writerow(list(self.labels(i)) + [int(self.population[i])])
        return buf.getvalue()


def _parse_population(raw) -> int:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise DataError(f"malformed population value {raw!r}") from None
    if not np.isfinite(value):
        raise DataError(f"malformed population value {raw!r}")
    if value < 0:
        raise DataError(f"negative population {raw!r}")
    # round() is half-to-even
    return int(round(value))


def build_frame(specs: Sequence[FactorSpec], rows: Iterable) -> Frame:
    """Build a frame from records holding one label per factor plus a count.

    Rows may be mappings (keyed by factor name and ``population``) or
    sequences ordered as the specs followed by the population.  Duplicate
    keys have their populations summed.
    """
    specs = list(specs)
    names = [s.name for s in specs]
    order: dict[tuple[int, ...], int] = {}
    pops: list[int] = []
    for row in rows:
        if isinstance(row, Mapping):
            try:
                labels = [row[n] for n in names]
                raw_pop = row[POPULATION_COLUMN]
            except KeyError as exc:
                raise DataError(f"malformed row, missing column {exc}") from None
        else:
            row = list(row)
            if len(row) != len(specs) + 1:
                raise DataError(f"malformed row {row!r}")
            labels, raw_pop = row[:-1], row[-1]
        key = tuple(s.index(str(lab)) for s, lab in zip(specs, labels))
        pop = _parse_population(raw_pop)
        if key in order:
            pops[order[key]] += pop
        else:
            order[key] = len(pops)
            pops.append(pop)
    keys = np.array(list(order), dtype=np.int64).reshape(-1, len(specs))
    return Frame(specs, keys, np.array(pops, dtype=np.int64))


def read_frame_csv(path_or_text, specs: Sequence[FactorSpec]) -> Frame:
    text = _read_text(path_or_text)
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [n for n in [s.name for s in specs] + [POPULATION_COLUMN] if n not in header]
    if missing:
        raise DataError(f"frame file is missing columns {missing}")
    return build_frame(specs, reader)


def group_map(frame: Frame, term: Sequence[str]) -> GroupMap:
    """Map frame cells to groups of the interaction of ``term`` factors.

    Groups enumerate the full cross product of the participating factors in
    lexicographic level order; groups with no cells simply receive none.
    """
    term = tuple(term)
    if not term:
        raise DataError("empty term")
    positions = [frame.factor_position(n) for n in term]
    radices = [frame.factors[p].n_levels for p in positions]
    assignment = interaction_index(frame.keys[:, positions], radices)
    assignment.setflags(write=False)
    return GroupMap(term, int(np.prod(radices)), assignment)


def _read_text(path_or_text) -> str:
    if isinstance(path_or_text, str) and "\n" in path_or_text:
        return path_or_text
    with open(path_or_text, encoding="utf-8", newline="") as fh:
        return fh.read()
