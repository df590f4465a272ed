"""Certainty gates: cutoffs calibrated on validation scores, flags, strata, votes."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import MethodKind, VOTE_MEMBERS


class Direction(str, enum.Enum):
    HIGH_IS_UNCERTAIN = "high_score_is_uncertain"
    LOW_IS_UNCERTAIN = "low_score_is_uncertain"


class Flag(str, enum.Enum):
    CERTAIN = "certain"
    UNCERTAIN = "uncertain"


def direction_for(method: MethodKind) -> Direction:
    method = MethodKind(method)
    if method is MethodKind.CONFORMAL:
        return Direction.LOW_IS_UNCERTAIN
    if method.is_vote:
        raise ValueError(f"{method.value} is a voting rule and has no score direction")
    return Direction.HIGH_IS_UNCERTAIN


@dataclass(frozen=True)
class GatePolicy:
    method: MethodKind
    cutoff: float | None
    source: str = "absolute"  # "percentile", "absolute", or "baseline" (no gating)
    percentile: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", MethodKind(self.method))
        if self.source not in ("percentile", "absolute", "baseline"):
            raise ValueError(f"unknown cutoff source {self.source!r}")
        if self.percentile is not None and not 0 <= self.percentile <= 100:
            raise ValueError("percentile must lie in [0, 100]")
        if self.cutoff is None and self.source != "baseline":
            raise ValueError("only a baseline policy may omit the cutoff")

    @property
    def direction(self) -> Direction:
        return direction_for(self.method)

    def to_json(self) -> dict:
        return {"method": self.method.value, "cutoff": self.cutoff,
                "direction": self.direction.value, "percentile": self.percentile,
                "source": self.source}

    @classmethod
    def from_json(cls, obj: Mapping) -> "GatePolicy":
        pol = cls(MethodKind(obj["method"]), obj["cutoff"], obj.get("source", "absolute"),
                  obj.get("percentile"))
        if "direction" in obj and Direction(obj["direction"]) is not pol.direction:
            raise ValueError(f"direction {obj['direction']} does not match method {pol.method.value}")
        return pol


@dataclass(frozen=True)
class VotingRule:
    k_required: int

    def __post_init__(self):
        if self.k_required not in (2, 3):
            raise ValueError("k_required must be 2 (Majority) or 3 (All)")

    members = VOTE_MEMBERS

    @property
    def method(self) -> MethodKind:
        return MethodKind.MAJORITY if self.k_required == 2 else MethodKind.ALL

    @classmethod
    def for_method(cls, method: MethodKind) -> "VotingRule":
        method = MethodKind(method)
        if method is MethodKind.MAJORITY:
            return cls(2)
        if method is MethodKind.ALL:
            return cls(3)
        raise ValueError(f"{method.value} is not a voting rule")


MAJORITY = VotingRule(2)
ALL = VotingRule(3)


@dataclass(frozen=True)
class VotingGate:
    """A voting rule bundled with one calibrated policy per member."""

    rule: VotingRule
    policies: tuple[GatePolicy, ...]

    def __post_init__(self):
        got = sorted(p.method.value for p in self.policies)
        if got != sorted(m.value for m in VOTE_MEMBERS):
            raise ValueError(f"voting gate needs exactly one policy for each of DO, TTA, Conformal; got {got}")

    def policy(self, method: MethodKind) -> GatePolicy:
        return next(p for p in self.policies if p.method is MethodKind(method))

    def to_json(self) -> dict:
        return {"method": self.rule.method.value, "k_required": self.rule.k_required,
                "reading": "uncertain when >= k members flag uncertain",
                "members": [p.to_json() for p in self.policies]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "VotingGate":
        return cls(VotingRule(int(obj["k_required"])),
                   tuple(GatePolicy.from_json(p) for p in obj["members"]))


def dump_gate(gate: GatePolicy | VotingGate) -> str:
    return json.dumps(gate.to_json(), indent=2, sort_keys=True) + "\n"


def load_gate(text: str) -> GatePolicy | VotingGate:
    obj = json.loads(text)
    return VotingGate.from_json(obj) if "members" in obj else GatePolicy.from_json(obj)


def percentile_cutoff(validation_scores: Sequence[float], percentile: float) -> float:
    """Linear interpolation between closest ranks of the sorted validation scores."""
    if not 0 <= percentile <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    v = np.sort(np.asarray(validation_scores, dtype=float))
    if v.size == 0:
        raise ValueError("percentile of an empty score list")
    rank = (v.size - 1) * percentile / 100.0
    lo = math.floor(rank)
    if lo + 1 >= v.size:
        return float(v[lo])
    return float(v[lo] + (rank - lo) * (v[lo + 1] - v[lo]))


def percentile_policy(method: MethodKind, validation_scores: Sequence[float], percentile: float) -> GatePolicy:
    return GatePolicy(method, percentile_cutoff(validation_scores, percentile), "percentile", percentile)


def flag(score: float, policy: GatePolicy) -> Flag:
    if policy.cutoff is None:
        return Flag.CERTAIN
    if policy.direction is Direction.HIGH_IS_UNCERTAIN:
        return Flag.UNCERTAIN if score >= policy.cutoff else Flag.CERTAIN
    return Flag.UNCERTAIN if score < policy.cutoff else Flag.CERTAIN


def flags(scores: Iterable[float], policy: GatePolicy) -> np.ndarray:
    """Vectorised :func:`flag`; True marks uncertain."""
    s = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=float)
    if policy.cutoff is None:
        return np.zeros(s.shape, dtype=bool)
    if policy.direction is Direction.HIGH_IS_UNCERTAIN:
        return s >= policy.cutoff
    return s < policy.cutoff


@dataclass(frozen=True)
class StratifiedCohort:
    certain_ids: frozenset[str]
    uncertain_ids: frozenset[str]
    rule: GatePolicy | VotingRule | VotingGate

    @property
    def total(self) -> int:
        return len(self.certain_ids) + len(self.uncertain_ids)

    @property
    def retention(self) -> float:
        return len(self.certain_ids) / self.total if self.total else 0.0


def stratify(scored: Iterable[tuple[str, float]], policy: GatePolicy) -> StratifiedCohort:
    certain, uncertain = set(), set()
    for rid, score in scored:
        if rid in certain or rid in uncertain:
            raise ValueError(f"duplicate id {rid!r}")
        (uncertain if flag(score, policy) is Flag.UNCERTAIN else certain).add(rid)
    return StratifiedCohort(frozenset(certain), frozenset(uncertain), policy)


def vote(member_flags: Mapping[MethodKind, Flag], rule: VotingRule) -> Flag:
    missing = [m.value for m in VOTE_MEMBERS if MethodKind(m) not in member_flags]
    if missing:
        raise ValueError(f"missing member flag(s): {', '.join(missing)}")
    n_uncertain = sum(Flag(member_flags[m]) is Flag.UNCERTAIN for m in VOTE_MEMBERS)
    return Flag.UNCERTAIN if n_uncertain >= rule.k_required else Flag.CERTAIN


def vote_arrays(member_uncertain: Mapping[MethodKind, np.ndarray], rule: VotingRule) -> np.ndarray:
    missing = [m.value for m in VOTE_MEMBERS if m not in member_uncertain]
    if missing:
        raise ValueError(f"missing member flag(s): {', '.join(missing)}")
    count = sum(np.asarray(member_uncertain[m], dtype=int) for m in VOTE_MEMBERS)
    return count >= rule.k_required


def stratify_vote(ids: Sequence[str], member_scores: Mapping[MethodKind, Sequence[float]],
                  gate: VotingGate) -> StratifiedCohort:
    unc = vote_arrays({m: flags(member_scores[m], gate.policy(m)) for m in VOTE_MEMBERS}, gate.rule)
    certain = frozenset(i for i, u in zip(ids, unc) if not u)
    uncertain = frozenset(i for i, u in zip(ids, unc) if u)
    if len(certain) + len(uncertain) != len(ids):
        raise ValueError("duplicate ids")
    return StratifiedCohort(certain, uncertain, gate)


class NoQualifyingPoint:
    """Marker returned when no grid point reaches the requested gain."""

    def __init__(self, method: MethodKind, target_gain: float, best_gain: float | None):
        self.method = method
        self.target_gain = target_gain
        self.best_gain = best_gain

    def __bool__(self) -> bool:
        return False

    def __repr__(self) -> str:
        return (f"NoQualifyingPoint(method={self.method.value}, target_gain={self.target_gain}, "
                f"best_gain={self.best_gain})")


@dataclass(frozen=True)
class GateSelection:
    gate: GatePolicy | VotingGate
    retention: float
    gain: float
    grid_value: float | None


def select_cutoff_for_gain(sweep, method: MethodKind, target_gain: float = 10.0,
                           metric: str = "auc") -> GateSelection | NoQualifyingPoint:
    """Most-retentive validation gate whose certain-cohort metric gain reaches the target.

    Candidates are the validation-split certain rows for ``method`` plus the
    unstratified baseline (gain 0, retention 1). Ties on retention go to
    the smaller grid value. A voting rule has no member cutoffs at its
    baseline, so only its grid rows are candidates.
    """
    method = MethodKind(method)
    candidates = []
    best = None
    for row in sweep.rows:
        if row.method is not method or row.split != "validation":
            continue
        if row.stratum not in ("certain", "all") or (row.stratum == "all" and method.is_vote):
            continue
        gain = 0.0 if row.stratum == "all" else row.pc.get(metric)
        if gain is None:
            continue
        best = gain if best is None else max(best, gain)
        if gain >= target_gain:
            # baseline wins any retention tie: it is the no-gating endpoint
            gv = -math.inf if row.stratum == "all" else row.grid_value
            candidates.append((-row.retention, gv, row, gain))
    if not candidates:
        return NoQualifyingPoint(method, target_gain, best)
    candidates.sort(key=lambda c: (c[0], c[1]))
    _, _, row, gain = candidates[0]
    return GateSelection(sweep.gate_for(row), row.retention, gain,
                         None if row.stratum == "all" else row.grid_value)
