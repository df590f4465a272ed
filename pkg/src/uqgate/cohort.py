"""Prediction records, cohorts, and the JSONL/CSV exchange formats.

A cohort is the unit every other module consumes: one record per patient
holding the exported evidence of each uncertainty method. Records are
validated on the way in and never repaired.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

PROB_TOL = 1e-6


class Split(str, enum.Enum):
    VALIDATION = "validation"
    TEST = "test"
    CALIBRATION = "calibration"


class MethodKind(str, enum.Enum):
    DO = "DO"
    TTA = "TTA"
    CONFORMAL = "Conformal"
    EVDL = "EvDL"
    MAJORITY = "Majority"
    ALL = "All"

    @property
    def is_vote(self) -> bool:
        return self in (MethodKind.MAJORITY, MethodKind.ALL)

    @classmethod
    def parse(cls, text: str) -> "MethodKind":
        key = text.strip().lower()
        for m in cls:
            if m.value.lower() == key:
                return m
        raise ValueError(f"unknown method {text!r}")


SAMPLE_METHODS = (MethodKind.DO, MethodKind.TTA, MethodKind.EVDL)
VOTE_MEMBERS = (MethodKind.DO, MethodKind.TTA, MethodKind.CONFORMAL)


class CohortError(ValueError):
    """Raised when an input cohort violates the record schema."""

    def __init__(self, message: str, line: int | None = None, record_id: str | None = None):
        self.detail = message
        self.line = line
        self.record_id = record_id
        where = []
        if line is not None:
            where.append(f"line {line}")
        if record_id is not None:
            where.append(f"record {record_id!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _check_prob_rows(rows: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(rows)):
        raise CohortError(f"{name} contains non-finite values")
    if np.any(rows < 0.0) or np.any(rows > 1.0):
        bad = rows[(rows < 0.0) | (rows > 1.0)][0]
        raise CohortError(f"{name} entry {bad:g} outside [0, 1]")
    sums = rows.sum(axis=-1)
    dev = np.abs(sums - 1.0)
    if np.any(dev > PROB_TOL):
        s = float(np.atleast_1d(sums)[np.argmax(np.atleast_1d(dev))])
        verb = "exceeds" if s > 1.0 else "falls below"
        raise CohortError(f"{name}: probability sum {s:.6g} {verb} tolerance")


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    """One patient's exported prediction evidence.

    Optional fields are ``None`` when absent; nothing is defaulted.
    """

    id: str
    split: Split
    label: int
    base_probs: np.ndarray
    mc_probs: np.ndarray | None = None
    tta_probs: np.ndarray | None = None
    alphas: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise CohortError("id must be a non-empty string")
        try:
            object.__setattr__(self, "split", Split(self.split))
        except ValueError:
            raise CohortError(f"unknown split {self.split!r}", record_id=self.id) from None
        if isinstance(self.label, bool) or self.label not in (0, 1):
            raise CohortError(f"label must be 0 or 1, got {self.label!r}", record_id=self.id)
        object.__setattr__(self, "label", int(self.label))
        try:
            base = np.asarray(self.base_probs, dtype=float)
            if base.ndim != 1 or base.size < 2:
                raise CohortError("base_probs must be a vector of length >= 2")
            _check_prob_rows(base, "base_probs")
            k = base.size
            object.__setattr__(self, "base_probs", _frozen(base))
            for name in ("mc_probs", "tta_probs"):
                val = getattr(self, name)
                if val is None:
                    continue
                rows = np.asarray(val, dtype=float)
                if rows.ndim != 2 or rows.shape[0] < 1:
                    raise CohortError(f"{name} must be a non-empty matrix")
                if rows.shape[1] != k:
                    raise CohortError(f"{name} has {rows.shape[1]} classes, base_probs has {k}")
                _check_prob_rows(rows, name)
                object.__setattr__(self, name, _frozen(rows))
            if self.alphas is not None:
                a = np.asarray(self.alphas, dtype=float)
                if a.ndim != 1 or a.size != k:
                    raise CohortError(f"alphas must have length {k}")
                if not np.all(np.isfinite(a)):
                    raise CohortError("alphas contains non-finite values")
                if np.any(a < 1.0):
                    raise CohortError(f"alphas entry {a[a < 1.0][0]:g} < 1 (negative evidence)")
                object.__setattr__(self, "alphas", _frozen(a))
        except CohortError as exc:
            if exc.record_id is None:
                raise CohortError(exc.detail, record_id=self.id) from None
            raise

    @property
    def n_classes(self) -> int:
        return self.base_probs.size

    def __eq__(self, other):
        if not isinstance(other, PredictionRecord):
            return NotImplemented
        if (self.id, self.split, self.label) != (other.id, other.split, other.label):
            return False
        for name in ("base_probs", "mc_probs", "tta_probs", "alphas"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True

    __hash__ = None

    def to_json(self) -> dict:
        out = {"id": self.id, "split": self.split.value, "label": self.label,
               "base_probs": self.base_probs.tolist()}
        for name in ("mc_probs", "tta_probs", "alphas"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val.tolist()
        return out


@dataclass(frozen=True)
class Cohort:
    records: tuple[PredictionRecord, ...]
    provenance: str = ""
    n_classes: int = field(init=False)

    def __post_init__(self):
        recs = tuple(self.records)
        if not recs:
            raise CohortError("cohort is empty")
        object.__setattr__(self, "records", recs)
        seen: set[str] = set()
        k = recs[0].n_classes
        for r in recs:
            if r.id in seen:
                raise CohortError("duplicate id", record_id=r.id)
            seen.add(r.id)
            if r.n_classes != k:
                raise CohortError(f"record has K={r.n_classes}, cohort has K={k}", record_id=r.id)
        object.__setattr__(self, "n_classes", k)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def prevalence(self) -> float:
        return sum(r.label for r in self.records) / len(self.records)

    @property
    def splits(self) -> set[Split]:
        return {r.split for r in self.records}

    def split(self, name: Split | str) -> list[PredictionRecord]:
        name = Split(name)
        return [r for r in self.records if r.split is name]

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def with_split_alias(self, source: Split | str, target: Split | str) -> "Cohort":
        """Copy records of ``source`` into ``target`` (e.g. validation as calibration)."""
        source, target = Split(source), Split(target)
        extra = []
        for r in self.split(source):
            extra.append(PredictionRecord(
                id=f"{r.id}@{target.value}", split=target, label=r.label,
                base_probs=r.base_probs, mc_probs=r.mc_probs,
                tta_probs=r.tta_probs, alphas=r.alphas))
        return Cohort(self.records + tuple(extra), self.provenance)


# -- parsing ------------------------------------------------------------------

def _record_from_mapping(obj: dict, line: int) -> PredictionRecord:
    if not isinstance(obj, dict):
        raise CohortError("row is not an object", line=line)
    rid = obj.get("id")
    try:
        missing = [k for k in ("id", "split", "label", "base_probs") if k not in obj]
        if missing:
            raise CohortError(f"missing required field(s) {', '.join(missing)}")
        unknown = set(obj) - {"id", "split", "label", "base_probs", "mc_probs", "tta_probs", "alphas"}
        if unknown:
            raise CohortError(f"unknown field(s) {', '.join(sorted(unknown))}")
        return PredictionRecord(
            id=obj["id"], split=obj["split"], label=obj["label"],
            base_probs=obj["base_probs"], mc_probs=obj.get("mc_probs"),
            tta_probs=obj.get("tta_probs"), alphas=obj.get("alphas"))
    except CohortError as exc:
        raise CohortError(exc.detail, line=line,
                          record_id=rid if isinstance(rid, str) else None) from None
    except (TypeError, ValueError) as exc:
        raise CohortError(f"malformed row ({exc})", line=line,
                          record_id=rid if isinstance(rid, str) else None) from None


def _parse_jsonl(text: str) -> list[PredictionRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CohortError(f"invalid JSON ({exc.msg})", line=lineno) from None
        records.append(_record_from_mapping(obj, lineno))
    return records


def _floats(cell: str) -> list[float]:
    return [float(v) for v in cell.split(";")]


CSV_COLUMNS = ("id", "split", "label", "base_probs", "mc_probs", "tta_probs", "alphas")


def _parse_csv(text: str) -> list[PredictionRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CohortError("empty CSV input") from None
    missing = [c for c in ("id", "split", "label", "base_probs") if c not in header]
    if missing:
        raise CohortError(f"CSV header missing column(s) {', '.join(missing)}", line=1)
    records = []
    for row in reader:
        lineno = reader.line_num
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise CohortError(f"expected {len(header)} cells, got {len(row)}", line=lineno)
        cells = dict(zip(header, row))
        obj: dict = {"id": cells["id"], "split": cells["split"]}
        try:
            obj["label"] = int(cells["label"])
            obj["base_probs"] = _floats(cells["base_probs"])
            for name in ("mc_probs", "tta_probs"):
                if cells.get(name, "").strip():
                    obj[name] = [_floats(r) for r in cells[name].split("|")]
            if cells.get("alphas", "").strip():
                obj["alphas"] = _floats(cells["alphas"])
        except ValueError as exc:
            raise CohortError(f"malformed cell ({exc})", line=lineno, record_id=cells["id"] or None) from None
        records.append(_record_from_mapping(obj, lineno))
    return records


def parse_cohort(stream: IO[bytes] | bytes | str, format: str = "jsonl", provenance: str = "") -> Cohort:
    """Parse a cohort from JSONL or CSV.

    Any malformed row aborts the whole parse with a :class:`CohortError`
    naming the line (and record id when known); no partial cohort is returned.
    """
    data = stream if isinstance(stream, (bytes, str)) else stream.read()
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    if format == "jsonl":
        records = _parse_jsonl(text)
    elif format == "csv":
        records = _parse_csv(text)
    else:
        raise ValueError(f"unknown cohort format {format!r}")
    seen: dict[str, int] = {}
    k = None
    for i, r in enumerate(records):
        if r.id in seen:
            raise CohortError("duplicate id", record_id=r.id)
        seen[r.id] = i
        if k is None:
            k = r.n_classes
        elif r.n_classes != k:
            raise CohortError(f"heterogeneous class count: K={r.n_classes}, expected {k}", record_id=r.id)
    return Cohort(tuple(records), provenance)


def read_cohort(path, format: str | None = None) -> Cohort:
    path = str(path)
    if format is None:
        format = "csv" if path.endswith(".csv") else "jsonl"
    with open(path, "rb") as fh:
        return parse_cohort(fh, format, provenance=path)


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_cohort(cohort: Cohort, format: str = "jsonl") -> bytes:
    if format == "jsonl":
        lines = [json.dumps(r.to_json(), separators=(",", ":")) for r in cohort.records]
        return ("\n".join(lines) + "\n").encode()
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in cohort.records:
            def rows(m):
                return "" if m is None else "|".join(";".join(_fmt(v) for v in row) for row in m)
            w.writerow([
                r.id, r.split.value, r.label,
                ";".join(_fmt(v) for v in r.base_probs),
                rows(r.mc_probs), rows(r.tta_probs),
                "" if r.alphas is None else ";".join(_fmt(v) for v in r.alphas),
            ])
        return buf.getvalue().encode()
    raise ValueError(f"unknown cohort format {format!r}")


# -- validation ---------------------------------------------------------------

_REQUIRED_FIELD = {
    MethodKind.DO: "mc_probs",
    MethodKind.TTA: "tta_probs",
    MethodKind.EVDL: "alphas",
}


@dataclass
class ValidationReport:
    missing: dict[MethodKind, list[str]] = field(default_factory=dict)
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems and not any(self.missing.values())

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return not self.ok

    def lines(self) -> list[str]:
        out = list(self.problems)
        for method, ids in self.missing.items():
            if ids:
                fld = _REQUIRED_FIELD[method]
                shown = ", ".join(ids[:10]) + (" ..." if len(ids) > 10 else "")
                out.append(f"{method.value}: {len(ids)} record(s) missing {fld}: {shown}")
        return out

    def to_json(self) -> dict:
        return {"ok": self.ok, "problems": self.problems,
                "missing": {m.value: ids for m, ids in self.missing.items() if ids}}


def _expand(required: Iterable[MethodKind]) -> list[MethodKind]:
    out: list[MethodKind] = []
    for m in required:
        m = MethodKind(m)
        members = VOTE_MEMBERS if m.is_vote else (m,)
        for x in members:
            if x not in out:
                out.append(x)
    return out


def validate_cohort(cohort: Cohort, required: Iterable[MethodKind],
                    splits: Sequence[Split] | None = None) -> ValidationReport:
    """Report which records lack what each required method needs.

    ``splits`` restricts the per-record checks (all splits by default).
    """
    report = ValidationReport()
    wanted = None if splits is None else {Split(s) for s in splits}
    records = [r for r in cohort.records if wanted is None or r.split in wanted]
    for method in _expand(required):
        if method is MethodKind.CONFORMAL:
            if not cohort.split(Split.CALIBRATION):
                report.problems.append("Conformal: no calibration split")
            continue
        fld = _REQUIRED_FIELD[method]
        report.missing[method] = [r.id for r in records if getattr(r, fld) is None]
    return report
