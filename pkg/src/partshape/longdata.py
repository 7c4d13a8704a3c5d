"""Sparse longitudinal samples: container, CSV ingestion, domain mapping."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import qr


class DataError(ValueError):
    """Malformed or unusable input data."""


class SchemaError(DataError):
    pass


class Shape(str, enum.Enum):
    INCREASING = "increasing"
    DECREASING = "decreasing"
    CONVEX = "convex"
    CONCAVE = "concave"
    POSITIVE = "positive"
    NEGATIVE = "negative"

    @property
    def sign(self) -> float:
        """+1 for the base families, -1 for their mirror images."""
        return -1.0 if self in (Shape.DECREASING, Shape.CONCAVE, Shape.NEGATIVE) else 1.0

    @property
    def kind(self) -> str:
        if self in (Shape.INCREASING, Shape.DECREASING):
            return "monotone"
        if self in (Shape.CONVEX, Shape.CONCAVE):
            return "convex"
        return "positive"

    @classmethod
    def parse(cls, name: str) -> "Shape":
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {
            "monotone_increasing": "increasing", "monotone_decreasing": "decreasing",
            "nondecreasing": "increasing", "nonincreasing": "decreasing",
            "nonnegative": "positive", "nonpositive": "negative",
        }
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise SchemaError(f"unknown shape family {name!r}") from None


@dataclass(frozen=True)
class ShapeConstraint:
    """One partial shape restriction on covariate ``covariate`` (0-based).

    A combination such as "increasing and convex" is expressed by several
    constraints sharing the same covariate index; the intervals may overlap.
    """

    covariate: int
    interval: tuple[float, float]
    shape: Shape

    def __post_init__(self):
        a, b = (float(v) for v in self.interval)
        if not a < b:
            raise SchemaError(f"constraint interval must satisfy a < b, got {self.interval}")
        object.__setattr__(self, "interval", (a, b))
        if not isinstance(self.shape, Shape):
            object.__setattr__(self, "shape", Shape.parse(str(self.shape)))


@dataclass(frozen=True)
class Hypothesis:
    constraints: tuple[ShapeConstraint, ...]

    def __post_init__(self):
        cons = tuple(self.constraints)
        if not cons:
            raise SchemaError("a hypothesis needs at least one constraint")
        for c in cons:
            a, b = c.interval
            if a < -1e-12 or b > 1 + 1e-12:
                raise SchemaError(f"constraint interval {c.interval} lies outside [0, 1]")
        object.__setattr__(self, "constraints", cons)

    @classmethod
    def of(cls, *items: tuple[int, tuple[float, float], str | Shape]) -> "Hypothesis":
        return cls(tuple(ShapeConstraint(j, iv, Shape.parse(str(getattr(s, "value", s))))
                         for j, iv, s in items))

    def for_covariate(self, j: int) -> list[ShapeConstraint]:
        return [c for c in self.constraints if c.covariate == j]

    @property
    def covariates(self) -> list[int]:
        return sorted({c.covariate for c in self.constraints})

    def endpoints(self, j: int | None = None) -> list[float]:
        cons = self.constraints if j is None else self.for_covariate(j)
        return sorted({v for c in cons for v in c.interval})

    def mapped(self, fn) -> "Hypothesis":
        return Hypothesis(tuple(replace(c, interval=(fn(c.interval[0]), fn(c.interval[1])))
                                for c in self.constraints))


@dataclass(frozen=True)
class SubjectRecord:
    covariates: np.ndarray
    times: np.ndarray
    responses: np.ndarray
    id: object = None

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.covariates, dtype=float))
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        y = np.atleast_1d(np.asarray(self.responses, dtype=float))
        if t.shape != y.shape or t.ndim != 1:
            raise DataError("times and responses must be 1-d and of equal length")
        if t.size == 0:
            raise DataError(f"subject {self.id!r} has no observations")
        order = np.argsort(t, kind="stable")
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "times", t[order])
        object.__setattr__(self, "responses", y[order])

    @property
    def n_obs(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class LongitudinalSample:
    """n subjects with scalar covariates and irregularly timed responses.

    ``domain`` is always the interval in original time units; when
    ``normalized`` is true the stored times live on [0, 1] and
    :meth:`to_original` maps them back.
    """

    subjects: tuple[SubjectRecord, ...]
    domain: tuple[float, float]
    normalized: bool = False
    covariate_names: tuple[str, ...] = ()
    dropped: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        subs = tuple(self.subjects)
        if not subs:
            raise DataError("sample has no subjects")
        p = subs[0].covariates.size
        if any(s.covariates.size != p for s in subs):
            raise DataError("all covariate vectors must have the same length")
        lo, hi = (float(v) for v in self.domain)
        object.__setattr__(self, "subjects", subs)
        object.__setattr__(self, "domain", (lo, hi))
        t = np.concatenate([s.times for s in subs])
        bounds = (0.0, 1.0) if self.normalized else (lo, hi)
        span = max(bounds[1] - bounds[0], 1.0)
        if t.min() < bounds[0] - 1e-12 * span or t.max() > bounds[1] + 1e-12 * span:
            raise DataError(f"observation times fall outside the domain {bounds}")
        if not self.covariate_names:
            object.__setattr__(self, "covariate_names", tuple(f"x{j + 1}" for j in range(p)))

    # flat views, used by every fitting engine
    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].covariates.size

    @cached_property
    def design(self) -> np.ndarray:
        return np.vstack([s.covariates for s in self.subjects])

    @cached_property
    def counts(self) -> np.ndarray:
        return np.array([s.n_obs for s in self.subjects])

    @cached_property
    def subject_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.counts)

    @cached_property
    def times(self) -> np.ndarray:
        return np.concatenate([s.times for s in self.subjects])

    @cached_property
    def responses(self) -> np.ndarray:
        return np.concatenate([s.responses for s in self.subjects])

    @cached_property
    def obs_weights(self) -> np.ndarray:
        """1 / (n L_i) for every observation."""
        return 1.0 / (self.n * self.counts[self.subject_index])

    @cached_property
    def obs_design(self) -> np.ndarray:
        return self.design[self.subject_index]

    @property
    def total_obs(self) -> int:
        return int(self.counts.sum())

    def to_unit(self, t):
        lo, hi = self.domain
        return (np.asarray(t, dtype=float) - lo) / (hi - lo)

    def to_original(self, u):
        lo, hi = self.domain
        return lo + np.asarray(u, dtype=float) * (hi - lo)

    def with_responses(self, y: np.ndarray) -> "LongitudinalSample":
        y = np.asarray(y, dtype=float)
        if y.shape != (self.total_obs,):
            raise DataError("response vector has the wrong length")
        pieces = np.split(y, np.cumsum(self.counts)[:-1])
        subs = tuple(replace(s, responses=r) for s, r in zip(self.subjects, pieces))
        return replace(self, subjects=subs)

    def subset(self, idx: Sequence[int]) -> "LongitudinalSample":
        return replace(self, subjects=tuple(self.subjects[i] for i in idx), dropped={})

    def check_rank(self, rtol: float = 1e-10) -> None:
        check_full_rank(self.design, rtol, self.covariate_names)


def check_full_rank(design: np.ndarray, rtol: float = 1e-10, names=None) -> None:
    """Raise if ``design`` is column-rank deficient (pivoted QR, relative tol)."""
    X = np.atleast_2d(design)
    n, p = X.shape
    if n < p:
        raise DataError(f"design has {n} rows but {p} columns; full column rank impossible")
    _, R, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    smax = np.linalg.norm(X, 2)
    bad = np.flatnonzero(diag <= rtol * smax)
    if bad.size:
        cols = [int(piv[k]) for k in bad]
        label = [names[c] if names else str(c) for c in cols]
        raise DataError(f"design matrix is rank deficient; dependent column(s): {label}")


def from_arrays(ids, times, responses, covariates, *, domain=None, names=(),
                intercept: bool = False) -> LongitudinalSample:
    """Build a sample from long-format arrays (one row per observation).

    Covariates must be constant within a subject; the first row of each
    subject is used.
    """
    ids = np.asarray(ids)
    t = np.asarray(times, dtype=float)
    y = np.asarray(responses, dtype=float)
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if intercept:
        X = np.column_stack([np.ones(len(X)), X])
        names = ("intercept", *names)
    uniq, first = np.unique(ids, return_index=True)
    subjects = []
    for key in uniq[np.argsort(first)]:
        rows = np.flatnonzero(ids == key)
        subjects.append(SubjectRecord(X[rows[0]], t[rows], y[rows], id=key.item() if hasattr(key, "item") else key))
    if domain is None:
        domain = (float(t.min()), float(t.max()))
    sample = LongitudinalSample(tuple(subjects), tuple(domain), covariate_names=tuple(names))
    sample.check_rank()
    return sample


@dataclass(frozen=True)
class CsvSchema:
    id: str
    time: str
    response: str
    covariates: tuple[str, ...]
    intercept: bool = False
    delimiter: str = ","
    domain: tuple[float, float] | None = None


def load_csv(path, schema: CsvSchema) -> LongitudinalSample:
    """Read a long-format CSV (header row, one observation per row)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=schema.delimiter)
        header = reader.fieldnames or []
        needed = [schema.id, schema.time, schema.response, *schema.covariates]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            ids.append(rec[schema.id])
            try:
                rows.append([float(rec[c]) for c in needed[1:]])
            except (TypeError, ValueError):
                bad = [c for c in needed[1:] if not _is_number(rec[c])]
                raise DataError(f"{path}: row {lineno}: non-numeric value in column(s) {bad}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows)
    return from_arrays(np.array(ids), arr[:, 0], arr[:, 1], arr[:, 2:],
                       domain=schema.domain, names=tuple(schema.covariates),
                       intercept=schema.intercept)


def _is_number(s) -> bool:
    try:
        float(s)
    except (TypeError, ValueError):
        return False
    return True


def normalize_domain(sample: LongitudinalSample) -> LongitudinalSample:
    """Map observation times affinely onto [0, 1]; the original domain is kept."""
    if sample.normalized:
        return sample
    lo, hi = sample.domain
    if not hi > lo:
        raise DataError(f"domain [{lo}, {hi}] has zero length")
    subs = tuple(replace(s, times=np.clip((s.times - lo) / (hi - lo), 0.0, 1.0))
                 for s in sample.subjects)
    return replace(sample, subjects=subs, normalized=True)


def denormalize(sample: LongitudinalSample) -> LongitudinalSample:
    if not sample.normalized:
        return sample
    subs = tuple(replace(s, times=sample.to_original(s.times)) for s in sample.subjects)
    return replace(sample, subjects=subs, normalized=False)


def restrict_to_interval(sample: LongitudinalSample, interval) -> LongitudinalSample:
    """Keep observations with time in ``interval`` (unit scale, closed).

    Subjects left without observations are dropped. The counts of removed
    subjects and observations are recorded in ``sample.dropped``.
    """
    a, b = (float(v) for v in interval)
    if a < -1e-12 or b > 1 + 1e-12 or not a < b:
        raise DataError(f"interval {interval} is not a sub-interval of [0, 1]")
    unit = sample if sample.normalized else normalize_domain(sample)
    subs = []
    for s in unit.subjects:
        keep = (s.times >= a) & (s.times <= b)
        if keep.any():
            subs.append(replace(s, times=s.times[keep], responses=s.responses[keep]))
    if not subs:
        raise DataError(f"no observation falls inside {interval}")
    kept_obs = sum(s.n_obs for s in subs)
    dropped = {"subjects": unit.n - len(subs), "observations": unit.total_obs - kept_obs}
    return replace(unit, subjects=tuple(subs), dropped=dropped)


def rescale_to_interval(sample: LongitudinalSample, interval) -> LongitudinalSample:
    """Stretch a sample restricted to ``interval`` back onto [0, 1].

    The original-units domain shrinks accordingly, so reports stay in the
    caller's units.
    """
    a, b = (float(v) for v in interval)
    subs = tuple(replace(s, times=np.clip((s.times - a) / (b - a), 0.0, 1.0)) for s in sample.subjects)
    lo, hi = sample.domain
    dom = (lo + a * (hi - lo), lo + b * (hi - lo))
    return replace(sample, subjects=subs, domain=dom, normalized=True, dropped=dict(sample.dropped))
