"""Scalar uncertainty scores for the sample-based methods (DO, TTA) and EvDL."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort, CohortError, MethodKind, PredictionRecord, Split

_FIELD = {MethodKind.DO: "mc_probs", MethodKind.TTA: "tta_probs", MethodKind.EVDL: "alphas"}


@dataclass(frozen=True, eq=False)
class ScoredRecord:
    id: str
    method: MethodKind
    score: float
    # mean predictive distribution for entropy methods, alphas / S for EvDL
    mean_probs: np.ndarray
    label: int

    @property
    def risk(self) -> float:
        """Positive-class probability under this method's own predictive distribution."""
        return float(self.mean_probs[1])


def mean_predictive_distribution(samples) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] == 0 or samples.shape[1] == 0:
        raise ValueError("samples must be a non-empty T x K matrix")
    # summing T copies and dividing by T is not exact in floating point
    if np.all(samples == samples[0]):
        return samples[0].copy()
    return samples.mean(axis=0)


def entropy(probs, base: float = math.e) -> float:
    """Shannon entropy of one distribution, with 0 * log 0 taken as 0."""
    p = np.asarray(probs, dtype=float)
    nz = p[p > 0.0]
    h = -float(np.sum(nz * np.log(nz)))
    if base != math.e:
        h /= math.log(base)
    # rounding can push a deterministic distribution a hair below zero
    return max(h, 0.0)


def predictive_entropy(samples, base: float = math.e) -> float:
    """Entropy of the mean distribution over stochastic passes (nats by default)."""
    return entropy(mean_predictive_distribution(samples), base=base)


def evidential_uncertainty(alphas) -> float:
    a = np.asarray(alphas, dtype=float)
    if a.ndim != 1 or a.size < 2:
        raise ValueError("alphas must be a vector of length >= 2")
    if np.any(a < 1.0) or not np.all(np.isfinite(a)):
        raise ValueError("alphas must be finite and >= 1")
    return a.size / float(a.sum())


def score_record(record: PredictionRecord, method: MethodKind) -> ScoredRecord:
    method = MethodKind(method)
    if method not in _FIELD:
        raise ValueError(f"{method.value} has no per-record sample score")
    value = getattr(record, _FIELD[method])
    if value is None:
        raise CohortError(f"missing {_FIELD[method]} required by {method.value}", record_id=record.id)
    if method is MethodKind.EVDL:
        return ScoredRecord(record.id, method, evidential_uncertainty(value),
                            value / value.sum(), record.label)
    mean = mean_predictive_distribution(value)
    return ScoredRecord(record.id, method, entropy(mean), mean, record.label)


def score_records(records, method: MethodKind) -> list[ScoredRecord]:
    return [score_record(r, method) for r in records]


def score_split(cohort: Cohort, split: Split | str, method: MethodKind) -> list[ScoredRecord]:
    """Score every record of one split, preserving input order."""
    return score_records(cohort.split(split), method)
