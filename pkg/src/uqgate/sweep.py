"""Method x cutoff x split x stratum sweeps, table emission, and figure series."""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import conformal, metrics
from .cohort import Cohort, MethodKind, SAMPLE_METHODS, Split, VOTE_MEMBERS, validate_cohort
from .gating import (GatePolicy, VotingGate, VotingRule, flags, percentile_policy,
                     vote_arrays)
from .metrics import METRICS, MetricsReport
from .scores import score_records

METHOD_ORDER = (MethodKind.DO, MethodKind.TTA, MethodKind.CONFORMAL, MethodKind.EVDL,
                MethodKind.MAJORITY, MethodKind.ALL)
SWEEP_SPLITS = (Split.VALIDATION, Split.TEST)
STRATA = ("certain", "uncertain")

_SHORT = {"auc": "auc", "sensitivity": "sens", "specificity": "spec", "ppv": "ppv", "npv": "npv"}

CSV_COLUMNS = (
    "method", "grid_kind", "grid_value", "split", "stratum", "n", "retention", "prevalence",
    "auc", "auc_lo", "auc_hi", "sens", "sens_lo", "sens_hi", "spec", "spec_lo", "spec_hi",
    "ppv", "ppv_lo", "ppv_hi", "npv", "npv_lo", "npv_hi",
    "pc_auc", "pc_sens", "pc_spec", "pc_ppv", "pc_npv",
    "cutoff",
)


def default_percentiles() -> tuple[float, ...]:
    return tuple(float(p) for p in range(30, 91, 10))


def default_credibility() -> tuple[float, ...]:
    return tuple(round(0.3 + 0.1 * i, 10) for i in range(7))


@dataclass(frozen=True)
class GridConfig:
    percentiles: tuple[float, ...] = field(default_factory=default_percentiles)
    credibility: tuple[float, ...] = field(default_factory=default_credibility)

    def __post_init__(self):
        object.__setattr__(self, "percentiles", tuple(sorted(float(p) for p in self.percentiles)))
        object.__setattr__(self, "credibility", tuple(sorted(float(c) for c in self.credibility)))
        if any(not 0 <= p <= 100 for p in self.percentiles):
            raise ValueError("percentiles must lie in [0, 100]")
        if any(not 0 <= c <= 1 for c in self.credibility):
            raise ValueError("credibility cutoffs must lie in [0, 1]")

    def vote_pairs(self) -> list[tuple[float, float]]:
        """Grid point i pairs the i-th percentile with the i-th credibility cutoff."""
        if len(self.percentiles) != len(self.credibility):
            raise ValueError("voting needs percentile and credibility grids of equal length")
        return list(zip(self.percentiles, self.credibility))


@dataclass
class SweepRow:
    method: MethodKind
    grid_kind: str  # "baseline", "percentile", "credibility"
    grid_value: float | None
    split: str
    stratum: str  # "all", "certain", "uncertain"
    n: int
    retention: float
    report: MetricsReport
    pc: dict[str, float | None]
    cutoff: float | None = None
    members: dict[str, float] | None = None

    @property
    def is_baseline(self) -> bool:
        return self.grid_kind == "baseline"

    def value(self, metric: str) -> float | None:
        return self.report.value(metric)

    def ci(self, metric: str) -> tuple[float, float] | None:
        return self.report.ci.get(metric)


@dataclass
class SweepTable:
    rows: list[SweepRow]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, method=None, split=None, stratum=None, grid_kind=None) -> list[SweepRow]:
        out = []
        for r in self.rows:
            if method is not None and r.method is not MethodKind(method):
                continue
            if split is not None and r.split != Split(split).value:
                continue
            if stratum is not None and r.stratum != stratum:
                continue
            if grid_kind is not None and r.grid_kind != grid_kind:
                continue
            out.append(r)
        return out

    def baseline(self, method: MethodKind, split) -> SweepRow:
        rows = self.select(method, split, grid_kind="baseline")
        if len(rows) != 1:
            raise LookupError(f"expected one baseline row for {MethodKind(method).value}/{split}, found {len(rows)}")
        return rows[0]

    def methods(self) -> list[MethodKind]:
        present = {r.method for r in self.rows}
        return [m for m in METHOD_ORDER if m in present]

    def gate_for(self, row: SweepRow) -> GatePolicy | VotingGate:
        """Reconstruct the calibrated gate that produced ``row``."""
        if row.is_baseline:
            if row.method.is_vote:
                raise ValueError("the unstratified baseline of a voting rule has no member cutoffs")
            return GatePolicy(row.method, None, "baseline")
        if not row.method.is_vote:
            if row.grid_kind == "percentile":
                return GatePolicy(row.method, row.cutoff, "percentile", row.grid_value)
            return GatePolicy(row.method, row.cutoff, "absolute")
        members = row.members or self._vote_members(row)
        policies = []
        for m in VOTE_MEMBERS:
            if m is MethodKind.CONFORMAL:
                policies.append(GatePolicy(m, members[m.value], "absolute"))
            else:
                policies.append(GatePolicy(m, members[m.value], "percentile", row.grid_value))
        return VotingGate(VotingRule.for_method(row.method), tuple(policies))

    def _vote_members(self, row: SweepRow) -> dict[str, float]:
        # tables read back from CSV carry no member cutoffs; recover them from member rows
        pct = sorted({r.grid_value for r in self.select(MethodKind.DO, grid_kind="percentile")})
        cred = sorted({r.grid_value for r in self.select(MethodKind.CONFORMAL, grid_kind="credibility")})
        idx = pct.index(row.grid_value)
        out = {}
        for m, kind, gv in ((MethodKind.DO, "percentile", row.grid_value),
                            (MethodKind.TTA, "percentile", row.grid_value),
                            (MethodKind.CONFORMAL, "credibility", cred[idx])):
            match = [r for r in self.select(m, row.split, "certain", kind) if r.grid_value == gv]
            out[m.value] = match[0].cutoff
        return out


# -- running ------------------------------------------------------------------

def _cell_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def _threads() -> int:
    raw = os.environ.get("UQGATE_THREADS", "0").strip() or "0"
    n = int(raw)
    return n if n > 0 else min(8, os.cpu_count() or 1)


@dataclass
class _SplitData:
    ids: list[str]
    labels: np.ndarray
    scores: dict[MethodKind, np.ndarray]
    risk: dict[MethodKind, np.ndarray]


def _split_data(cohort: Cohort, split: Split, methods: Sequence[MethodKind],
                table: conformal.CalibrationTable | None) -> _SplitData:
    recs = cohort.split(split)
    data = _SplitData([r.id for r in recs], np.array([r.label for r in recs], dtype=int), {}, {})
    base_risk = np.array([r.base_probs[1] for r in recs], dtype=float)
    for m in methods:
        if m in SAMPLE_METHODS:
            scored = score_records(recs, m)
            data.scores[m] = np.array([s.score for s in scored], dtype=float)
            data.risk[m] = np.array([s.risk for s in scored], dtype=float)
        elif m is MethodKind.CONFORMAL:
            res = conformal.conformal_split(cohort, split, table)
            data.scores[m] = np.array([c.credibility for c in res], dtype=float)
            data.risk[m] = base_risk
        else:
            data.risk[m] = base_risk
    return data


def run_sweep(cohort: Cohort, methods: Iterable[MethodKind] = METHOD_ORDER,
              grid: GridConfig | None = None, tau: float = 0.5, n_resamples: int = 2000,
              seed: int = 0, calibration_split: Split | str = Split.CALIBRATION,
              threads: int | None = None) -> SweepTable:
    """Evaluate every (method, grid value, split, stratum) cell.

    Percentile cutoffs come from validation scores only and are then applied
    unchanged to the test split. Majority/All rows need all three members
    (DO, TTA, Conformal) in ``methods``; otherwise they are dropped with a
    warning recorded in ``meta["notes"]``.
    """
    grid = grid or GridConfig()
    wanted = [MethodKind(m) for m in methods]
    notes: list[str] = []
    votes = [m for m in wanted if m.is_vote]
    if votes and not all(m in wanted for m in VOTE_MEMBERS):
        msg = "voting rows skipped: Majority/All need DO, TTA and Conformal"
        notes.append(msg)
        warnings.warn(msg, stacklevel=2)
        votes = []
    if votes:
        grid.vote_pairs()
    methods = [m for m in METHOD_ORDER if m in wanted and (not m.is_vote or votes)]

    calib_split = Split(calibration_split)
    report = validate_cohort(cohort, methods, splits=SWEEP_SPLITS)
    if not report.ok:
        raise ValueError("cohort does not support the requested methods: " + "; ".join(report.lines()))
    if calib_split is not Split.CALIBRATION and MethodKind.CONFORMAL in methods and not cohort.split(calib_split):
        raise ValueError(f"no records in the {calib_split.value} split to calibrate on")
    for s in SWEEP_SPLITS:
        if not cohort.split(s):
            raise ValueError(f"cohort has no {s.value} records")

    table = conformal.calibrate(cohort, calib_split) if MethodKind.CONFORMAL in methods else None
    data = {s: _split_data(cohort, s, methods, table) for s in SWEEP_SPLITS}
    val = data[Split.VALIDATION]

    # member policies per grid point, computed once from validation scores
    policies: dict[MethodKind, list[tuple[str, float, GatePolicy]]] = {}
    for m in methods:
        if m in SAMPLE_METHODS:
            policies[m] = [("percentile", p, percentile_policy(m, val.scores[m], p)) for p in grid.percentiles]
        elif m is MethodKind.CONFORMAL:
            policies[m] = [("credibility", c, GatePolicy(m, c, "absolute")) for c in grid.credibility]

    cells = []  # (sort key, method, kind, value, split, stratum, mask, cutoff, members)
    for mi, m in enumerate(METHOD_ORDER):
        if m not in methods:
            continue
        for si, s in enumerate(SWEEP_SPLITS):
            d = data[s]
            cells.append(((mi, si, -1, 0), m, "baseline", None, s, "all",
                          np.ones(len(d.ids), dtype=bool), None, None))
            if m.is_vote:
                rule = VotingRule.for_method(m)
                for gi, (p, _) in enumerate(grid.vote_pairs()):
                    member_pol = {mm: policies[mm][gi][2] for mm in VOTE_MEMBERS}
                    unc = vote_arrays({mm: flags(d.scores[mm], member_pol[mm]) for mm in VOTE_MEMBERS}, rule)
                    members = {mm.value: member_pol[mm].cutoff for mm in VOTE_MEMBERS}
                    for ti, stratum in enumerate(STRATA):
                        mask = ~unc if stratum == "certain" else unc
                        cells.append(((mi, si, gi, ti), m, "percentile", p, s, stratum, mask, None, members))
            else:
                for gi, (kind, gv, pol) in enumerate(policies[m]):
                    unc = flags(d.scores[m], pol)
                    for ti, stratum in enumerate(STRATA):
                        mask = ~unc if stratum == "certain" else unc
                        cells.append(((mi, si, gi, ti), m, kind, gv, s, stratum, mask, pol.cutoff, None))

    def evaluate(cell):
        key, m, kind, gv, s, stratum, mask, cutoff, members = cell
        d = data[s]
        n = int(mask.sum())
        if n == 0:
            rep = metrics.empty_report(tau)
        else:
            rep = metrics.report(d.labels[mask], d.risk[m][mask], tau=tau, n_resamples=n_resamples,
                                 seed=_cell_seed(seed, *[k + 1 for k in key]))
        # retention is the gate's certain fraction, shared by both rows of a stratum pair
        retention = (len(d.ids) - n) / len(d.ids) if stratum == "uncertain" else n / len(d.ids)
        return SweepRow(m, kind, gv, s.value, stratum, n, retention, rep, {}, cutoff, members)

    n_threads = threads if threads is not None else _threads()
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            rows = list(pool.map(evaluate, cells))
    else:
        rows = [evaluate(c) for c in cells]

    out = SweepTable(rows, meta={
        "tau": tau, "n_resamples": n_resamples, "seed": seed,
        "percentiles": list(grid.percentiles), "credibility": list(grid.credibility),
        "calibration_split": calib_split.value,
        "vote_reading": "uncertain when >= k of DO/TTA/Conformal flag uncertain",
        "ci_method": "percentile bootstrap", "notes": notes,
    })
    _fill_percent_change(out)
    return out


def _fill_percent_change(table: SweepTable) -> None:
    for row in table.rows:
        base = table.baseline(row.method, row.split)
        row.pc = {m: metrics.safe_percent_change(row.value(m), base.value(m)) for m in METRICS}


# -- emission -----------------------------------------------------------------

def _f(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def _row_cells(row: SweepRow) -> list[str]:
    cells = [row.method.value, row.grid_kind, _f(row.grid_value), row.split, row.stratum,
             str(row.n), _f(row.retention), _f(row.report.prevalence)]
    for m in METRICS:
        ci = row.ci(m)
        cells += [_f(row.value(m)), _f(ci[0] if ci else None), _f(ci[1] if ci else None)]
    cells += [_f(row.pc.get(m)) for m in METRICS]
    # gate parameter, kept at full precision so a gate rebuilt from the CSV is exact
    cells.append("" if row.cutoff is None else repr(float(row.cutoff)))
    return cells


def _r6(x: float | None) -> float | None:
    return None if x is None else round(float(x), 6)


def _row_json(row: SweepRow) -> dict:
    out = {"method": row.method.value, "grid_kind": row.grid_kind, "grid_value": _r6(row.grid_value),
           "split": row.split, "stratum": row.stratum, "n": row.n,
           "retention": _r6(row.retention), "prevalence": _r6(row.report.prevalence)}
    for m in METRICS:
        ci = row.ci(m)
        s = _SHORT[m]
        out[s] = _r6(row.value(m))
        out[f"{s}_lo"] = _r6(ci[0]) if ci else None
        out[f"{s}_hi"] = _r6(ci[1]) if ci else None
    for m in METRICS:
        out[f"pc_{_SHORT[m]}"] = _r6(row.pc.get(m))
    out["cutoff"] = row.cutoff
    if row.members is not None:
        out["members"] = {k: float(v) for k, v in row.members.items()}
    out["undefined"] = dict(sorted(row.report.undefined.items()))
    return out


def emit_table(table: SweepTable, format: str = "csv") -> bytes:
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in table.rows:
            w.writerow(_row_cells(row))
        return buf.getvalue().encode()
    if format == "json":
        obj = {"columns": list(CSV_COLUMNS), "meta": table.meta,
               "rows": [_row_json(r) for r in table.rows]}
        return (json.dumps(obj, indent=1, sort_keys=False, allow_nan=False) + "\n").encode()
    raise ValueError(f"unknown table format {format!r}")


def _num(cell) -> float | None:
    if cell is None or cell == "":
        return None
    return float(cell)


def _row_from_flat(d: dict) -> SweepRow:
    ci, vals, pc = {}, {}, {}
    for m in METRICS:
        s = _SHORT[m]
        vals[m] = _num(d.get(s))
        lo, hi = _num(d.get(f"{s}_lo")), _num(d.get(f"{s}_hi"))
        ci[m] = None if lo is None or hi is None else (lo, hi)
        pc[m] = _num(d.get(f"pc_{s}"))
    rep = MetricsReport(int(d["n"]), _num(d.get("prevalence")), tau=float("nan"), ci=ci,
                        undefined=dict(d.get("undefined") or {}), **vals)
    members = d.get("members")
    return SweepRow(MethodKind(d["method"]), d["grid_kind"], _num(d.get("grid_value")), d["split"],
                    d["stratum"], int(d["n"]), float(d["retention"]), rep, pc, _num(d.get("cutoff")),
                    None if members is None else {k: float(v) for k, v in members.items()})


def parse_table(data: bytes | str, format: str = "csv") -> SweepTable:
    text = data.decode() if isinstance(data, bytes) else data
    if format == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError("sweep CSV header does not match the expected columns")
        table = SweepTable([_row_from_flat(r) for r in reader])
    elif format == "json":
        obj = json.loads(text)
        table = SweepTable([_row_from_flat(r) for r in obj["rows"]], meta=obj.get("meta", {}))
    else:
        raise ValueError(f"unknown table format {format!r}")
    tau = table.meta.get("tau", 0.5)
    for r in table.rows:
        r.report.tau = tau
    return table


# -- figure series ------------------------------------------------------------

FIGURES = {
    "auc_vs_certain": (("auc",), ("certain",)),
    "auc_vs_uncertain": (("auc",), ("uncertain",)),
    "se_sp": (("sensitivity", "specificity"), ("certain", "uncertain")),
    "ppv_npv": (("ppv", "npv"), ("certain", "uncertain")),
}


def emit_plot_data(table: SweepTable, figure: str) -> dict:
    """Per-series points (stratum %, metric % change, CI lo %, CI hi %).

    Each series starts from the unstratified baseline at (100, 0) and runs
    through the grid in order of decreasing stratum size. Points whose
    metric is undefined are omitted.
    """
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; choose from {', '.join(FIGURES)}")
    if not table.rows:
        raise ValueError("empty sweep")
    metric_names, strata = FIGURES[figure]
    series = []
    for m in table.methods():
        for split in SWEEP_SPLITS:
            try:
                base = table.baseline(m, split)
            except LookupError:
                continue
            for metric in metric_names:
                b = base.value(metric)
                for stratum in strata:
                    pts = []
                    for row in [base] + table.select(m, split, stratum):
                        v = row.pc.get(metric)
                        if v is None:
                            continue
                        ci = row.ci(metric)
                        lo = metrics.safe_percent_change(ci[0], b) if ci else None
                        hi = metrics.safe_percent_change(ci[1], b) if ci else None
                        frac = row.n / base.n
                        pts.append([_r6(100.0 * frac), _r6(v), _r6(lo), _r6(hi)])
                    pts.sort(key=lambda p: -p[0])
                    series.append({"method": m.value, "split": split.value, "metric": metric,
                                   "stratum": stratum, "points": pts})
    return {"figure": figure, "series": series}
