"""Unit-level survey and census containers, CSV ingestion and area indexing."""

from __future__ import annotations

import csv
import dataclasses
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class SchemaError(ValueError):
    """Raised when an input file does not match the declared column schema."""


@dataclass(frozen=True)
class Schema:
    """Column names used to read a survey or census CSV."""

    area: str
    covariates: tuple[str, ...]
    response: str | None = None
    pi: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.covariates:
            raise SchemaError("schema needs at least one covariate column")
        names = [self.area, *self.covariates]
        names += [c for c in (self.response, self.pi) if c is not None]
        if len(set(names)) != len(names):
            raise SchemaError(f"schema lists a column twice: {names}")


@dataclass(frozen=True)
class UnitRecord:
    area_id: str
    x: tuple[float, ...]
    y: float | None = None
    pi: float | None = None


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _factorize(labels: Sequence[str]) -> tuple[tuple[str, ...], np.ndarray]:
    """Dense integer codes in first-appearance order."""
    lookup: dict[str, int] = {}
    codes = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        codes[i] = lookup.setdefault(lab, len(lookup))
    return tuple(lookup), codes


@dataclass(frozen=True, eq=False)
class AreaData:
    """Unit-level records grouped by area.

    Rows keep their input order; ``areas`` lists the distinct area labels in
    order of first appearance and ``codes[i]`` is the position of row ``i``'s
    area in that tuple.
    """

    area_ids: np.ndarray
    x: np.ndarray
    y: np.ndarray | None = None
    pi: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    areas: tuple[str, ...] = field(init=False)
    codes: np.ndarray = field(init=False)

    def __post_init__(self):
        ids = np.asarray([str(a) for a in self.area_ids], dtype=object)
        x = np.array(self.x, dtype=float, ndmin=2)
        if x.ndim != 2 or x.shape[0] != len(ids):
            raise ValueError("x must be a 2-D array with one row per record")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates must be finite")
        y = None
        if self.y is not None:
            y = np.array(self.y, dtype=float)
            if y.shape != (len(ids),):
                raise ValueError("y must have one value per record")
        pi = None
        if self.pi is not None:
            pi = np.array(self.pi, dtype=float)
            if pi.shape != (len(ids),):
                raise ValueError("pi must have one value per record")
            if np.any(~(pi > 0) | (pi > 1)):
                raise ValueError("inclusion probabilities must lie in (0, 1]")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValueError("covariate_names does not match the number of columns")
        areas, codes = _factorize(list(ids))
        object.__setattr__(self, "area_ids", _freeze(ids))
        object.__setattr__(self, "x", _freeze(x))
        object.__setattr__(self, "y", None if y is None else _freeze(y))
        object.__setattr__(self, "pi", None if pi is None else _freeze(pi))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "areas", areas)
        object.__setattr__(self, "codes", _freeze(codes))

    def __len__(self) -> int:
        return len(self.area_ids)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_areas(self) -> int:
        return len(self.areas)

    @property
    def sizes(self) -> np.ndarray:
        """Row count per area, aligned with ``areas``."""
        return np.bincount(self.codes, minlength=self.n_areas)

    @property
    def area_index(self) -> dict[str, np.ndarray]:
        order = np.argsort(self.codes, kind="stable")
        bounds = np.cumsum(self.sizes)[:-1]
        return dict(zip(self.areas, np.split(order, bounds)))

    def records(self) -> Iterator[UnitRecord]:
        for i in range(len(self)):
            yield UnitRecord(
                self.area_ids[i],
                tuple(self.x[i].tolist()),
                None if self.y is None else float(self.y[i]),
                None if self.pi is None else float(self.pi[i]),
            )

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return type(self)(
            self.area_ids[rows],
            self.x[rows],
            None if self.y is None else self.y[rows],
            None if self.pi is None else self.pi[rows],
            self.covariate_names,
        )

    def area_position(self, area_id: str) -> int:
        try:
            return self.areas.index(area_id)
        except ValueError:
            raise KeyError(f"unknown area {area_id!r}") from None


class SurveySample(AreaData):
    """Sampled units with observed responses; the fitting input."""

    def __post_init__(self):
        if self.y is None:
            raise ValueError("a survey sample needs a response for every record")
        super().__post_init__()
        if len(self) == 0:
            raise ValueError("survey sample is empty")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("responses must be finite")

    @property
    def n_d(self) -> np.ndarray:
        return self.sizes

    @property
    def D_s(self) -> int:
        return self.n_areas

    @classmethod
    def from_records(cls, records: Iterable[UnitRecord], covariate_names=()):
        return _from_records(cls, records, covariate_names)


class CensusFrame(AreaData):
    """Population covariates; the prediction input. Responses are optional."""

    def __post_init__(self):
        super().__post_init__()
        if len(self) == 0:
            raise ValueError("census frame is empty")

    @property
    def N_d(self) -> np.ndarray:
        return self.sizes

    @classmethod
    def from_records(cls, records: Iterable[UnitRecord], covariate_names=()):
        return _from_records(cls, records, covariate_names)

    def in_sample(self, sample: SurveySample) -> np.ndarray:
        """Boolean flag per census area: does the sample contain it?"""
        sampled = set(sample.areas)
        return np.array([a in sampled for a in self.areas], dtype=bool)


def _from_records(cls, records, covariate_names):
    records = list(records)
    if not records:
        raise ValueError("no records")
    ys = [r.y for r in records]
    pis = [r.pi for r in records]
    widths = {len(r.x) for r in records}
    if len(widths) != 1:
        raise ValueError(f"records have covariate vectors of different lengths: {sorted(widths)}")
    return cls(
        [r.area_id for r in records],
        np.array([r.x for r in records], dtype=float),
        None if any(v is None for v in ys) else ys,
        None if any(v is None for v in pis) else pis,
        covariate_names,
    )


def check_compatible(sample: AreaData, census: AreaData) -> None:
    """Reject sample/census pairs with different covariate dimension."""
    if sample.p != census.p:
        raise ValueError(
            f"covariate dimension mismatch: sample has p={sample.p}, census has p={census.p}"
        )
    sizes = dict(zip(census.areas, census.sizes))
    for area, n in zip(sample.areas, sample.sizes):
        if area in sizes and sizes[area] < n:
            raise ValueError(f"area {area!r}: census has {sizes[area]} rows but sample has {n}")


def split_by_area(data: AreaData) -> list[tuple[str, AreaData]]:
    """One sub-dataset per area, in first-appearance order of the areas."""
    return [(area, data.take(rows)) for area, rows in data.area_index.items()]


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise SchemaError(f"row {row}, column {column!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(value):
        raise SchemaError(f"row {row}, column {column!r}: value {cell!r} is not finite")
    return value


def _read(path, schema: Schema, need_response: bool):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file")
        header = [h.strip() for h in header]
        dupes = sorted({h for h in header if header.count(h) > 1})
        if dupes:
            raise SchemaError(f"{path}: duplicate header column(s) {dupes}")
        col = {name: j for j, name in enumerate(header)}
        required = [schema.area, *schema.covariates]
        if need_response:
            required.append(schema.response)
        missing = [c for c in required if c not in col]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        use_y = schema.response is not None and schema.response in col
        use_pi = schema.pi is not None and schema.pi in col
        if schema.pi is not None and not use_pi and need_response:
            raise SchemaError(f"{path}: missing column(s) {[schema.pi]}")

        areas, xs, ys, pis = [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}: row {line} has {len(row)} fields, header has {len(header)}")
            area = row[col[schema.area]].strip()
            if not area:
                raise SchemaError(f"row {line}, column {schema.area!r}: empty area id")
            areas.append(area)
            xs.append([_parse_float(row[col[c]], line, c) for c in schema.covariates])
            if use_y:
                ys.append(_parse_float(row[col[schema.response]], line, schema.response))
            if use_pi:
                pi = _parse_float(row[col[schema.pi]], line, schema.pi)
                if not 0 < pi <= 1:
                    raise SchemaError(f"row {line}, column {schema.pi!r}: inclusion probability {pi} outside (0, 1]")
                pis.append(pi)
    if not areas:
        raise SchemaError(f"{path}: no data rows")
    x = np.array(xs, dtype=float).reshape(len(areas), len(schema.covariates))
    return areas, x, (ys if use_y else None), (pis if use_pi else None)


def load_survey_csv(path, schema: Schema) -> SurveySample:
    if schema.response is None:
        raise SchemaError("survey schema needs a response column")
    areas, x, y, pi = _read(path, schema, need_response=True)
    return SurveySample(areas, x, y, pi, schema.covariates)


def load_census_csv(path, schema: Schema) -> CensusFrame:
    areas, x, y, pi = _read(path, schema, need_response=False)
    return CensusFrame(areas, x, y, pi, schema.covariates)


def write_csv(data: AreaData, path, schema: Schema) -> None:
    """Write ``data`` with the column names of ``schema``; floats use repr for exact round trips."""
    header = [schema.area, *schema.covariates]
    if data.y is not None and schema.response is not None:
        header.append(schema.response)
    if data.pi is not None and schema.pi is not None:
        header.append(schema.pi)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(data)):
            row = [data.area_ids[i], *map(repr, data.x[i].tolist())]
            if data.y is not None and schema.response is not None:
                row.append(repr(float(data.y[i])))
            if data.pi is not None and schema.pi is not None:
                row.append(repr(float(data.pi[i])))
            w.writerow(row)


@dataclass(frozen=True)
class Hyperparams:
    """Boosting hyperparameters.

    Defaults are conservative settings for samples of a few thousand units;
    with many covariates ``colsample_bytree=0.6`` is a reasonable change.
    """

    eta: float = 0.01
    max_depth: int = 3
    min_child_weight: float = 3.0
    subsample: float = 0.5
    colsample_bytree: float = 1.0
    reg_lambda: float = 1.0
    gamma: float = 0.9
    max_rounds: int = 500
    early_stop_patience: int = 50
    cv_fraction: float = 0.2

    def __post_init__(self):
        checks = [
            (self.eta >= 0, "eta must be >= 0"),
            (int(self.max_depth) == self.max_depth and self.max_depth >= 1, "max_depth must be a positive integer"),
            (self.min_child_weight >= 0, "min_child_weight must be >= 0"),
            (0 < self.subsample <= 1, "subsample must lie in (0, 1]"),
            (0 < self.colsample_bytree <= 1, "colsample_bytree must lie in (0, 1]"),
            (self.reg_lambda >= 0, "reg_lambda must be >= 0"),
            (self.gamma >= 0, "gamma must be >= 0"),
            (int(self.max_rounds) == self.max_rounds and self.max_rounds >= 1, "max_rounds must be a positive integer"),
            (int(self.early_stop_patience) == self.early_stop_patience and self.early_stop_patience >= 1,
             "early_stop_patience must be a positive integer"),
            (0 < self.cv_fraction < 1, "cv_fraction must lie in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        object.__setattr__(self, "max_depth", int(self.max_depth))
        object.__setattr__(self, "max_rounds", int(self.max_rounds))
        object.__setattr__(self, "early_stop_patience", int(self.early_stop_patience))

    def replace(self, **changes) -> "Hyperparams":
        return dataclasses.replace(self, **changes)


DESIGN_BASED_PARAMS = Hyperparams(colsample_bytree=0.6)


def substream(seed, name: str, *keys: int) -> np.random.SeedSequence:
    """Seed sequence for the named sub-stream ``name`` at position ``keys``.

    A pure function of its arguments, so work items seeded this way can run in
    any order or in parallel.
    """
    if isinstance(seed, np.random.SeedSequence):
        entropy, prefix = seed.entropy, tuple(seed.spawn_key)
    else:
        entropy, prefix = int(seed), ()
    tag = zlib.crc32(name.encode()) if name else None
    key = prefix + ((tag,) if tag is not None else ()) + tuple(int(k) for k in keys)
    return np.random.SeedSequence(entropy, spawn_key=key)


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
