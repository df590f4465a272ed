"""Inductive conformal classification with inverse-probability nonconformity."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort, CohortError, Split


def nonconformity(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=float)
    if not 0 <= label < probs.size:
        raise ValueError(f"label {label} out of range for K={probs.size}")
    return 1.0 - float(probs[label])


@dataclass(frozen=True)
class CalibrationTable:
    """Sorted calibration nonconformity scores."""

    scores: tuple[float, ...]

    def __post_init__(self):
        s = tuple(sorted(float(v) for v in self.scores))
        if not s:
            raise ValueError("calibration table needs at least one score")
        object.__setattr__(self, "scores", s)

    @property
    def n(self) -> int:
        return len(self.scores)

    def to_json(self) -> str:
        return json.dumps({"scores": list(self.scores)})

    @classmethod
    def from_json(cls, text: str) -> "CalibrationTable":
        return cls(tuple(json.loads(text)["scores"]))


def calibrate(cohort: Cohort, split: Split | str = Split.CALIBRATION) -> CalibrationTable:
    recs = cohort.split(split)
    if not recs:
        raise CohortError(f"no records in the {Split(split).value} split to calibrate on")
    return CalibrationTable(tuple(nonconformity(r.base_probs, r.label) for r in recs))


def p_value(table: CalibrationTable, candidate_score: float) -> float:
    """Unsmoothed ICP p-value; calibration ties count as at-least-as-strange."""
    n_ge = table.n - bisect.bisect_left(table.scores, candidate_score)
    return (n_ge + 1) / (table.n + 1)


def p_values(table: CalibrationTable, probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    return np.array([p_value(table, nonconformity(probs, c)) for c in range(probs.size)])


def credibility(table: CalibrationTable, probs) -> float:
    return float(p_values(table, probs).max())


def prediction_set(table: CalibrationTable, probs, epsilon: float) -> set[int]:
    return {c for c, p in enumerate(p_values(table, probs)) if p > epsilon}


@dataclass(frozen=True, eq=False)
class ConformalResult:
    id: str
    p_values: np.ndarray
    label: int
    risk: float

    @property
    def credibility(self) -> float:
        return float(self.p_values.max())

    def prediction_set(self, epsilon: float) -> set[int]:
        return {c for c, p in enumerate(self.p_values) if p > epsilon}


def conformal_split(cohort: Cohort, split: Split | str, table: CalibrationTable) -> list[ConformalResult]:
    return [ConformalResult(r.id, p_values(table, r.base_probs), r.label, float(r.base_probs[1]))
            for r in cohort.split(split)]
