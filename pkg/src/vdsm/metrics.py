"""Kaplan-Meier estimation and quantile-truncated discrimination metrics.

Both discrimination metrics use inverse-probability-of-censoring weights
from a Kaplan-Meier fit of the censoring distribution, evaluated at the
left limit of each event time.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError

QUANTILES = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function starting at 1.0 before the first knot."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        """S(t): value after all knots <= t."""
        idx = np.searchsorted(self.times, t, side="right")
        return np.concatenate(([1.0], self.values))[idx]

    def left_limit(self, t):
        """S(t-): value after all knots < t."""
        idx = np.searchsorted(self.times, t, side="left")
        return np.concatenate(([1.0], self.values))[idx]


def kaplan_meier(times, events):
    """Product-limit survival estimate.

    At tied times, events are removed from the risk set before censorings,
    i.e. a subject censored at t is still at risk for deaths at t.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events).reshape(-1).astype(bool)
    if times.size == 0:
        raise InvalidInputError("kaplan_meier needs at least one observation")
    if times.shape != events.shape:
        raise InvalidInputError("times and events differ in length")
    if np.any(~(times > 0)):
        raise InvalidInputError("times must be strictly positive")
    uniq, inverse = np.unique(times, return_inverse=True)
    deaths = np.bincount(inverse, weights=events, minlength=uniq.size)
    counts = np.bincount(inverse, minlength=uniq.size)
    at_risk = times.size - np.concatenate(([0], np.cumsum(counts)[:-1]))
    values = np.cumprod(1.0 - deaths / at_risk)
    return StepFunction(uniq, values)


def censoring_survival(times, events):
    """KM estimate G of the censoring distribution."""
    return kaplan_meier(times, 1 - np.asarray(events).astype(int))


def event_quantiles(times, events, quantiles=QUANTILES):
    """Linear-interpolation quantiles of the uncensored event times."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    observed = times[events]
    if observed.size == 0:
        raise InvalidInputError("no uncensored events to take quantiles of")
    return tuple(float(q) for q in np.quantile(observed, quantiles))


def _ipcw(times, events, at):
    return censoring_survival(times, events).left_limit(at)


def _prepare(risks, times, events, horizon):
    risks = np.asarray(risks, dtype=np.float64).reshape(-1)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events).reshape(-1).astype(bool)
    if not (risks.size == times.size == events.size):
        raise InvalidInputError("risks, times and events differ in length")
    if not np.all(np.isfinite(risks)):
        raise InvalidInputError("risks must be finite")
    if not horizon > 0:
        raise InvalidInputError("horizon must be positive")
    return risks, times, events


def _pair_score(r_i, r_j):
    return (r_i > r_j) + 0.5 * (r_i == r_j)


def concordance_td(risks, times, events, horizon):
    """IPCW-weighted truncated concordance index.

    Comparable pairs have t_i < t_j, delta_i = 1 and t_i <= horizon; each is
    weighted by 1 / G(t_i-)^2.  Ties in risk count one half.
    """
    risks, times, events = _prepare(risks, times, events, horizon)
    g = _ipcw(times, events, times)
    anchors = np.flatnonzero(events & (times <= horizon))
    zero = g[anchors] <= 0
    if np.any(zero):
        warnings.warn(f"dropped {int(zero.sum())} anchor(s) with zero censoring survival", stacklevel=2)
        anchors = anchors[~zero]
    num = 0.0
    den = 0.0
    order = np.argsort(times, kind="stable")
    sorted_t = times[order]
    sorted_r = risks[order]
    for i in anchors:
        start = np.searchsorted(sorted_t, times[i], side="right")
        if start == sorted_t.size:
            continue
        w = 1.0 / (g[i] * g[i])
        others = sorted_r[start:]
        num += w * float(np.sum(_pair_score(risks[i], others)))
        den += w * others.size
    if den == 0:
        raise UndefinedMetricError(f"no comparable pairs at horizon {horizon}")
    return float(num / den)


def cumulative_dynamic_auc(risks, times, events, horizon):
    """IPCW cumulative/dynamic AUC at ``horizon``.

    Cases: events with t_i <= horizon, weight 1 / G(t_i-).  Controls:
    t_j > horizon, weight 1.  Ties in risk count one half.
    """
    risks, times, events = _prepare(risks, times, events, horizon)
    cases = np.flatnonzero(events & (times <= horizon))
    controls = np.flatnonzero(times > horizon)
    if cases.size == 0 or controls.size == 0:
        raise UndefinedMetricError(f"need at least one case and one control at horizon {horizon}")
    g = _ipcw(times, events, times[cases])
    keep = g > 0
    if not np.all(keep):
        warnings.warn(f"dropped {int((~keep).sum())} case(s) with zero censoring survival", stacklevel=2)
        cases, g = cases[keep], g[keep]
        if cases.size == 0:
            raise UndefinedMetricError(f"no weighted cases at horizon {horizon}")
    w = 1.0 / g
    ctrl = np.sort(risks[controls])
    r = risks[cases]
    below = np.searchsorted(ctrl, r, side="left")
    ties = np.searchsorted(ctrl, r, side="right") - below
    num = float(np.sum(w * (below + 0.5 * ties)))
    return num / (float(np.sum(w)) * ctrl.size)


# reports ------------------------------------------------------------------------


@dataclass
class HorizonResult:
    quantile: float
    horizon: float
    ctd: float
    auc: float


@dataclass
class EvalReport:
    """Per-seed horizon results and their aggregate."""

    model: str
    seeds: list = field(default_factory=list)
    runs: list = field(default_factory=list)  # one list[HorizonResult] per seed

    def add(self, seed, results):
        for r in results:
            for value in (r.ctd, r.auc):
                if not 0.0 <= value <= 1.0:
                    raise InvalidInputError(f"metric value {value} outside [0, 1]")
        self.seeds.append(seed)
        self.runs.append(list(results))

    def summary(self):
        """{metric: [(quantile, horizon, mean, std)]} over seeds (population std)."""
        out = {}
        for metric in ("ctd", "auc"):
            rows = []
            for j, q in enumerate(QUANTILES):
                vals = np.array([getattr(run[j], metric) for run in self.runs])
                horizon = float(np.mean([run[j].horizon for run in self.runs]))
                rows.append((q, horizon, float(vals.mean()), float(vals.std())))
            out[metric] = rows
        return out


METRIC_TITLES = {"ctd": "Time-dependent Concordance-Index", "auc": "ROC-AUC"}
CSV_HEADER = ["model", "metric", "quantile", "horizon", "mean", "std", "n_seeds"]


def reports_to_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rep in reports:
        for metric, rows in rep.summary().items():
            for q, horizon, mean, std in rows:
                writer.writerow([rep.model, metric, f"{q:.2f}", repr(horizon), repr(mean), repr(std), len(rep.runs)])
    return buf.getvalue()


def reports_to_table(reports, dataset=""):
    """Plain-text tables, one per metric: rows are models, columns the
    25/50/75% event-time quantiles, cells ``mean ± std``."""
    blocks = []
    name_w = max([len("Models")] + [len(r.model) for r in reports])
    cell_w = len("0.0000 ± 0.0000")
    for metric in ("ctd", "auc"):
        title = METRIC_TITLES[metric] + (f" on {dataset}" if dataset else "")
        header = "Models".ljust(name_w) + " | " + " ".join(f"{int(q * 100)}%".center(cell_w) for q in QUANTILES)
        lines = [title, "Quantiles of Event Times".rjust(len(header)), header, "-" * len(header)]
        for rep in reports:
            cells = [f"{mean:.4f} ± {std:.4f}" for _, _, mean, std in rep.summary()[metric]]
            lines.append(rep.model.ljust(name_w) + " | " + " ".join(c.center(cell_w) for c in cells))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def evaluate_risks(risk_fn, times, events, horizons):
    """HorizonResults for risk_fn(horizon) -> risks at each quantile horizon."""
    results = []
    for q, h in zip(QUANTILES, horizons):
        try:
            risks = risk_fn(h)
            results.append(
                HorizonResult(q, h, concordance_td(risks, times, events, h), cumulative_dynamic_auc(risks, times, events, h))
            )
        except UndefinedMetricError as err:
            raise UndefinedMetricError(f"{err} (quantile {q:.2f}, horizon {h:g})") from err
    return results
