"""Survival datasets: ingestion, splitting, standardisation, synthesis.

Column schemas for the two clinical datasets are pinned in
``docs/data_dictionary.md``; see ``SUPPORT_SCHEMA`` and ``FLCHAIN_SCHEMA``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distributions as dist
from .errors import IngestionError, InvalidInputError
from .numerics import RngStream

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "?"})
MISSING_LEVEL = "missing"


@dataclass(frozen=True)
class SurvivalRecord:
    x: np.ndarray
    delta: int
    u: float

    def __post_init__(self):
        if self.delta not in (0, 1):
            raise InvalidInputError("delta must be 0 or 1")
        if not self.u > 0:
            raise InvalidInputError("u must be positive")


@dataclass
class SurvivalData:
    """Column-oriented collection of survival records."""

    x: np.ndarray
    delta: np.ndarray
    u: np.ndarray
    feature_names: list = field(default_factory=list)
    ids: np.ndarray = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.delta = np.asarray(self.delta).astype(np.int64).reshape(-1)
        self.u = np.asarray(self.u, dtype=np.float64).reshape(-1)
        n = self.u.size
        if self.x.shape[0] != n or self.delta.size != n:
            raise InvalidInputError("x, delta and u must describe the same records")
        if np.any(~(self.u > 0)):
            raise InvalidInputError("all times must be strictly positive")
        if np.any((self.delta != 0) & (self.delta != 1)):
            raise InvalidInputError("delta must be 0 or 1")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.x.shape[1])]
        if self.ids is None:
            self.ids = np.arange(n)
        self.ids = np.asarray(self.ids)

    def __len__(self):
        return self.u.size

    @property
    def dim(self):
        return self.x.shape[1]

    def records(self):
        return [SurvivalRecord(self.x[i].copy(), int(self.delta[i]), float(self.u[i])) for i in range(len(self))]

    @classmethod
    def from_records(cls, records, feature_names=None):
        records = list(records)
        return cls(
            np.array([r.x for r in records]),
            np.array([r.delta for r in records]),
            np.array([r.u for r in records]),
            feature_names or [],
        )

    def subset(self, idx):
        idx = np.asarray(idx)
        return SurvivalData(self.x[idx], self.delta[idx], self.u[idx], list(self.feature_names), self.ids[idx])


# csv helpers ---------------------------------------------------------------------


def _is_missing(value):
    return value.strip().lower() in MISSING_TOKENS


def _read_table(path, required):
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("empty file", row=1) from None
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise IngestionError(f"missing columns {missing}", row=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} fields, found {len(row)}", row=lineno)
            rows.append((lineno, dict(zip(header, row))))
    return rows


def _parse_float(value, column, lineno):
    if _is_missing(value):
        return math.nan
    try:
        return float(value)
    except ValueError:
        raise IngestionError(f"column {column!r}: cannot parse {value!r} as a number", row=lineno) from None


def _one_hot(values, column):
    levels = sorted(set(values))
    names = [f"{column}={lvl}" for lvl in levels]
    index = {lvl: j for j, lvl in enumerate(levels)}
    out = np.zeros((len(values), len(levels)))
    out[np.arange(len(values)), [index[v] for v in values]] = 1.0
    return out, names


SUPPORT_SCHEMA = {
    "time": "d.time",
    "event": "death",
    "numeric": [
        "age", "num.co", "meanbp", "wblc", "hrt", "resp", "temp", "pafi", "alb",
        "bili", "crea", "sod", "ph", "glucose", "bun", "urine", "adlp", "adls",
    ],
    "categorical": ["sex", "dzgroup", "dzclass", "income", "race", "ca"],
}

FLCHAIN_SCHEMA = {
    "time": "futime",
    "event": "death",
    "numeric": ["age", "sample.yr", "kappa", "lambda", "flc.grp", "creatinine", "mgus"],
    "binary": ["sex"],
}

# futime is recorded in whole days and includes zeros for same-day deaths
FLCHAIN_ZERO_TIME = 0.5


def _outcome(rows, schema, zero_time=None):
    times, events = [], []
    for lineno, row in rows:
        t = _parse_float(row[schema["time"]], schema["time"], lineno)
        e = _parse_float(row[schema["event"]], schema["event"], lineno)
        if math.isnan(t) or math.isnan(e):
            raise IngestionError("missing outcome", row=lineno)
        if e not in (0.0, 1.0):
            raise IngestionError(f"event indicator must be 0/1, got {e}", row=lineno)
        if t <= 0:
            if zero_time is None or t < 0:
                raise IngestionError(f"non-positive time {t}", row=lineno)
            t = zero_time
        times.append(t)
        events.append(int(e))
    return np.array(times), np.array(events)


def load_support(path):
    """SUPPORT records.  Numeric gaps stay NaN (imputed later from the train
    split by :func:`split_standardize`); categorical gaps become their own
    ``missing`` level before one-hot encoding."""
    schema = SUPPORT_SCHEMA
    required = [schema["time"], schema["event"], *schema["numeric"], *schema["categorical"]]
    rows = _read_table(path, required)
    if not rows:
        raise IngestionError("no data rows", row=2)
    blocks = [
        np.array([[_parse_float(row[c], c, ln) for c in schema["numeric"]] for ln, row in rows])
    ]
    names = list(schema["numeric"])
    for col in schema["categorical"]:
        values = [MISSING_LEVEL if _is_missing(row[col]) else row[col].strip() for _, row in rows]
        block, block_names = _one_hot(values, col)
        blocks.append(block)
        names.extend(block_names)
    u, delta = _outcome(rows, schema)
    ids = np.arange(len(rows))
    return SurvivalData(np.hstack(blocks), delta, u, names, ids)


def load_flchain(path):
    """FLCHAIN records with every row that has a missing covariate dropped."""
    schema = FLCHAIN_SCHEMA
    covariates = [*schema["numeric"], *schema["binary"]]
    rows = _read_table(path, [schema["time"], schema["event"], *covariates])
    kept = [(ln, row) for ln, row in rows if not any(_is_missing(row[c]) for c in covariates)]
    if not kept:
        raise IngestionError("no complete rows after dropping missing covariates")
    x = np.array([[_parse_float(row[c], c, ln) for c in schema["numeric"]] for ln, row in kept])
    names = list(schema["numeric"])
    for col in schema["binary"]:
        values = [row[col].strip() for _, row in kept]
        levels = sorted(set(values))
        if len(levels) > 2:
            raise IngestionError(f"column {col!r} has more than two levels: {levels}")
        code = {lvl: float(j) for j, lvl in enumerate(levels)}
        x = np.column_stack([x, [code[v] for v in values]])
        names.append(col)
    u, delta = _outcome(kept, schema, zero_time=FLCHAIN_ZERO_TIME)
    return SurvivalData(x, delta, u, names, np.arange(len(kept)))


def write_records_csv(data, path):
    """Record cache: id, features, delta, u (floats written round-trip exact)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *data.feature_names, "delta", "u"])
        for i in range(len(data)):
            writer.writerow([data.ids[i], *(repr(float(v)) for v in data.x[i]), int(data.delta[i]), repr(float(data.u[i]))])


def read_records_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "id" or header[-2:] != ["delta", "u"]:
            raise IngestionError("not a record cache file", row=1)
        ids, xs, deltas, us = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} fields, found {len(row)}", row=lineno)
            ids.append(int(row[0]))
            xs.append([_parse_float(v, header[j + 1], lineno) for j, v in enumerate(row[1:-2])])
            deltas.append(int(row[-2]))
            us.append(_parse_float(row[-1], "u", lineno))
    x = np.array(xs).reshape(len(us), len(header) - 3)
    return SurvivalData(x, deltas, us, header[1:-2], np.array(ids))


def write_labels_csv(ids, labels, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "cluster"])
        writer.writerows(zip((int(i) for i in ids), (int(c) for c in labels)))


# splitting -----------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: SurvivalData
    val: SurvivalData
    test: SurvivalData
    median: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x):
        x = np.array(x, dtype=np.float64)
        x = np.where(np.isnan(x), self.median, x)
        return (x - self.mean) / self.std


def split_standardize(data, ratios=(0.7, 0.1, 0.2), seed=0):
    """Seeded train/val/test split.  Median imputation and standardisation
    statistics come from the training rows only."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidInputError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(data)
    perm = RngStream(seed).permutation(n)
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    parts = np.split(perm, [n_train, n_train + n_val])
    train_x = data.x[parts[0]]
    with np.errstate(all="ignore"):
        median = np.nanmedian(train_x, axis=0) if train_x.size else np.zeros(data.dim)
    median = np.where(np.isnan(median), 0.0, median)
    filled = np.where(np.isnan(train_x), median, train_x)
    mean = filled.mean(axis=0) if filled.size else np.zeros(data.dim)
    std = filled.std(axis=0) if filled.size else np.ones(data.dim)
    std = np.where(std > 0, std, 1.0)
    split = DatasetSplit(None, None, None, median, mean, std)
    subsets = []
    for idx in parts:
        sub = data.subset(np.sort(idx))
        sub.x = split.transform(sub.x)
        subsets.append(sub)
    split.train, split.val, split.test = subsets
    return split


# synthetic data ------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Cluster-structured survival data: c ~ Cat(pi), x ~ N(mu_c, sigma_c^2),
    t ~ Weibull(shape_c, scale_c), independent exponential censoring."""

    pi: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    shape: np.ndarray
    scale: np.ndarray
    censoring_rate: float = 0.3

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.x_mean = np.atleast_2d(np.asarray(self.x_mean, dtype=np.float64))
        k = self.pi.size
        self.x_std = np.broadcast_to(np.asarray(self.x_std, dtype=np.float64), self.x_mean.shape).copy()
        self.shape = np.broadcast_to(np.asarray(self.shape, dtype=np.float64), (k,)).copy()
        self.scale = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (k,)).copy()
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-9:
            raise InvalidInputError("pi must be a simplex")
        if self.x_mean.shape[0] != k:
            raise InvalidInputError("x_mean needs one row per cluster")
        if np.any(self.x_std <= 0) or np.any(self.shape <= 0) or np.any(self.scale <= 0):
            raise InvalidInputError("std, shape and scale must be positive")
        if not 0.0 <= self.censoring_rate < 1.0:
            raise InvalidInputError("censoring rate must lie in [0, 1)")

    @property
    def k(self):
        return self.pi.size

    @property
    def dim(self):
        return self.x_mean.shape[1]


def default_synthetic_spec(k=3, dim=6, separation=3.0, censoring_rate=0.3):
    """Well-separated clusters with clearly ordered survival profiles."""
    x_mean = np.zeros((k, dim))
    for c in range(k):
        x_mean[c, c % dim] = separation
        x_mean[c, (c + 1) % dim] = -separation / 2
    shapes = np.linspace(1.5, 3.0, k)
    scales = 3.0 * 3.0 ** np.arange(k)
    return SyntheticSpec(np.full(k, 1.0 / k), x_mean, 1.0, shapes, scales, censoring_rate)


def _solve_censoring_rate(t, e, target, iters=200):
    # censored iff e / lam < t, i.e. the censored fraction mean(e < lam t) rises with lam
    if target <= 0:
        return 0.0
    lo, hi = 1e-12, 1.0
    while np.mean(e < hi * t) < target:
        hi *= 2.0
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if np.mean(e < mid * t) < target:
            lo = mid
        else:
            hi = mid
    lo_err = abs(np.mean(e < lo * t) - target)
    hi_err = abs(np.mean(e < hi * t) - target)
    return lo if lo_err <= hi_err else hi


def generate_synthetic(spec, n, seed=0):
    """Draw ``n`` records; returns ``(SurvivalData, cluster_labels)``."""
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    rng = RngStream(seed)
    labels = rng.choice(spec.k, size=n, p=spec.pi)
    x = spec.x_mean[labels] + spec.x_std[labels] * rng.normal((n, spec.dim))
    t = dist.sample("weibull", spec.shape[labels], spec.scale[labels], rng, n)
    e = rng.exponential(n)
    lam = _solve_censoring_rate(t, e, spec.censoring_rate)
    if lam == 0.0:
        u, delta = t, np.ones(n, dtype=int)
    else:
        c = e / lam
        delta = (t <= c).astype(int)
        u = np.minimum(t, c)
    names = [f"x{j}" for j in range(spec.dim)]
    return SurvivalData(x, delta, u, names, np.arange(n)), labels
