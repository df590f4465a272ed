"""Clinical metrics over a (sub)cohort with percentile-bootstrap intervals.

Undefined metrics (a degenerate stratum, 0/0 rates) are ``None`` with a
reason, never 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

METRICS = ("auc", "sensitivity", "specificity", "ppv", "npv")


def _arrays(labels, risk) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels, dtype=int)
    r = np.asarray(risk, dtype=float)
    if y.shape != r.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {r.size} risks")
    return y, r


def auc(labels, risk) -> float | None:
    """Mann-Whitney AUC with ties counted as one half; None if a class is absent."""
    y, r = _arrays(labels, risk)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(r)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_batch(labels: np.ndarray, risk: np.ndarray) -> np.ndarray:
    """Row-wise AUC of (B, n) label/risk matrices; NaN where undefined."""
    ranks = rankdata(risk, axis=1)
    n_pos = labels.sum(axis=1)
    n_neg = labels.shape[1] - n_pos
    with np.errstate(invalid="ignore", divide="ignore"):
        u = (ranks * labels).sum(axis=1) - n_pos * (n_pos + 1) / 2.0
        return np.where((n_pos > 0) & (n_neg > 0), u / (n_pos * n_neg), np.nan)


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    def __iter__(self):
        return iter((self.tp, self.fp, self.tn, self.fn))


def confusion(labels, risk, tau: float = 0.5) -> Confusion:
    y, r = _arrays(labels, risk)
    pred = r >= tau
    pos = y == 1
    return Confusion(int(np.sum(pred & pos)), int(np.sum(pred & ~pos)),
                     int(np.sum(~pred & ~pos)), int(np.sum(~pred & pos)))


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def derived_rates(cm) -> dict[str, float | None]:
    tp, fp, tn, fn = cm
    return {
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "ppv": _ratio(tp, tp + fp),
        "npv": _ratio(tn, tn + fn),
    }


_UNDEFINED_REASON = {
    "auc": "stratum lacks one outcome class",
    "sensitivity": "no positive outcomes (TP+FN = 0)",
    "specificity": "no negative outcomes (TN+FP = 0)",
    "ppv": "no predicted positives (TP+FP = 0)",
    "npv": "no predicted negatives (TN+FN = 0)",
}


def percent_change(value: float | None, baseline: float | None) -> float:
    if value is None or baseline is None:
        raise ValueError("percent change of an undefined metric")
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    return 100.0 * (value - baseline) / baseline


def safe_percent_change(value, baseline) -> float | None:
    if value is None or baseline is None or baseline <= 0:
        return None
    return percent_change(value, baseline)


def _metric_batch(name: str, y: np.ndarray, r: np.ndarray, tau: float) -> np.ndarray:
    if name == "auc":
        return auc_batch(y, r)
    pred = r >= tau
    pos = y == 1
    tp = np.sum(pred & pos, axis=1)
    fp = np.sum(pred & ~pos, axis=1)
    tn = np.sum(~pred & ~pos, axis=1)
    fn = np.sum(~pred & pos, axis=1)
    num, den = {
        "sensitivity": (tp, tp + fn),
        "specificity": (tn, tn + fp),
        "ppv": (tp, tp + fp),
        "npv": (tn, tn + fn),
    }[name]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.maximum(den, 1), np.nan)


def resample_indices(n: int, n_resamples: int, seed: int) -> np.ndarray:
    """Patient-level resamples; resample b draws from its own (seed, b) stream."""
    out = np.empty((n_resamples, n), dtype=np.intp)
    for b in range(n_resamples):
        out[b] = np.random.default_rng([seed, b]).integers(0, n, size=n)
    return out


@dataclass(frozen=True)
class BootstrapResult:
    lo: float
    hi: float
    skipped: int


def _percentile_interval(values: np.ndarray, level: float) -> tuple[float, float] | None:
    ok = values[~np.isnan(values)]
    if ok.size == 0:
        return None
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(ok, [tail, 100.0 - tail])
    return float(lo), float(hi)


def bootstrap_ci(labels, risk, metric: str | Callable = "auc", n_resamples: int = 2000,
                 seed: int = 0, tau: float = 0.5, level: float = 0.95,
                 indices: np.ndarray | None = None) -> BootstrapResult:
    """Nonparametric percentile bootstrap interval for one metric.

    Resamples where the metric is undefined are skipped and counted. Pass
    ``indices`` (B x n) to supply the resamples explicitly.
    """
    y, r = _arrays(labels, risk)
    if indices is None:
        indices = resample_indices(y.size, n_resamples, seed)
    if callable(metric):
        vals = np.array([np.nan if (v := metric(y[i], r[i])) is None else v for i in indices], dtype=float)
    else:
        vals = _metric_batch(metric, y[indices], r[indices], tau)
    interval = _percentile_interval(vals, level)
    if interval is None:
        raise ValueError(f"metric undefined on all {len(indices)} resamples")
    return BootstrapResult(interval[0], interval[1], int(np.isnan(vals).sum()))


@dataclass
class MetricsReport:
    n: int
    prevalence: float | None
    auc: float | None
    sensitivity: float | None
    specificity: float | None
    ppv: float | None
    npv: float | None
    tau: float = 0.5
    ci: dict[str, tuple[float, float] | None] = field(default_factory=dict)
    ci_skipped: dict[str, int] = field(default_factory=dict)
    undefined: dict[str, str] = field(default_factory=dict)
    confusion: Confusion | None = None

    def value(self, name: str) -> float | None:
        return getattr(self, name)

    def to_json(self) -> dict:
        out = {"n": self.n, "tau": self.tau, "prevalence": self.prevalence}
        for m in METRICS:
            out[m] = self.value(m)
            ci = self.ci.get(m)
            out[f"{m}_ci"] = None if ci is None else list(ci)
        out["ci_skipped"] = dict(self.ci_skipped)
        out["undefined"] = dict(self.undefined)
        if self.confusion is not None:
            out["confusion"] = {"tp": self.confusion.tp, "fp": self.confusion.fp,
                                "tn": self.confusion.tn, "fn": self.confusion.fn}
        return out


def empty_report(tau: float = 0.5) -> MetricsReport:
    """Report for an empty stratum: every metric undefined."""
    rep = MetricsReport(0, None, None, None, None, None, None, tau=tau)
    rep.undefined = {m: "empty stratum" for m in ("prevalence",) + METRICS}
    rep.ci = {m: None for m in METRICS}
    return rep


def report(labels: Sequence[int], risk: Sequence[float], tau: float = 0.5,
           n_resamples: int = 2000, seed: int = 0, level: float = 0.95) -> MetricsReport:
    y, r = _arrays(labels, risk)
    if y.size == 0:
        raise ValueError("cannot report on an empty slice")
    cm = confusion(y, r, tau)
    rates = derived_rates(cm)
    rep = MetricsReport(n=int(y.size), prevalence=float(y.mean()), auc=auc(y, r),
                        tau=tau, confusion=cm, **rates)
    for m in METRICS:
        if rep.value(m) is None:
            rep.undefined[m] = _UNDEFINED_REASON[m]
    if n_resamples > 0:
        idx = resample_indices(y.size, n_resamples, seed)
        ys, rs = y[idx], r[idx]
        for m in METRICS:
            vals = _metric_batch(m, ys, rs, tau)
            ci = _percentile_interval(vals, level)
            point = rep.value(m)
            if ci is not None and point is not None:
                # keep lo <= point <= hi when the resample distribution is lopsided
                ci = (min(ci[0], point), max(ci[1], point))
            rep.ci[m] = ci
            rep.ci_skipped[m] = int(np.isnan(vals).sum())
    return rep
