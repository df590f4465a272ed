"""Command-line entry point: simulate, sweep, select-gate, train-evdl.

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 no qualifying gate.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
import warnings
from pathlib import Path

import click
import numpy as np

from . import __version__
from .cohort import (Cohort, CohortError, MethodKind, PredictionRecord, parse_cohort, serialize_cohort,
                     validate_cohort)
from .evidential import TrainConfig, predict_alphas, train
from .gating import GateSelection, dump_gate, select_cutoff_for_gain
from .simulator import SimConfig, config_dict, generate
from .sweep import (FIGURES, GridConfig, METHOD_ORDER, SWEEP_SPLITS, emit_plot_data, emit_table,
                    parse_table, run_sweep)

EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_NO_GATE = 4


class ValidationFailure(click.ClickException):
    exit_code = EXIT_VALIDATION


class NoGate(click.ClickException):
    exit_code = EXIT_NO_GATE


def _config_error(msg: str) -> click.ClickException:
    exc = click.ClickException(msg)
    exc.exit_code = EXIT_CONFIG
    return exc


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_manifest(path, subcommand: str, config: dict, inputs: list, outputs: list) -> None:
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def parse_grid(text: str, integer: bool = False) -> tuple[float, ...]:
    """Parse ``lo..hi:step`` (inclusive) or a comma list."""
    text = text.strip()
    try:
        if ".." in text:
            span, _, step = text.partition(":")
            lo, hi = (float(v) for v in span.split(".."))
            step = float(step) if step else (10.0 if integer else 0.1)
            if step <= 0 or hi < lo:
                raise ValueError
            count = int(round((hi - lo) / step)) + 1
            values = [round(lo + i * step, 10) for i in range(count)]
        else:
            values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"cannot parse grid {text!r}; use lo..hi:step or a comma list") from None
    if not values:
        raise click.BadParameter("empty grid")
    return tuple(values)


def _parse_methods(text: str) -> list[MethodKind]:
    try:
        return [MethodKind.parse(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _read_cohort(path: str, fmt: str):
    if fmt == "auto":
        fmt = "csv" if path.endswith(".csv") else "jsonl"
    try:
        with open(path, "rb") as fh:
            return parse_cohort(fh, fmt, provenance=path)
    except CohortError as exc:
        raise ValidationFailure(str(exc)) from None


@click.group()
@click.version_option(__version__, prog_name="uqgate")
def main():
    """Uncertainty gating and clinical-metric sweeps over exported predictions."""


# -- simulate -----------------------------------------------------------------

SIM_FLAGS = {
    "n": "--n", "n_validation": "--n-validation", "n_test": "--n-test",
    "n_calibration": "--n-calibration", "event_rate": "--event-rate",
    "rare_fraction": "--rare-fraction", "noisy_fraction": "--noisy-fraction",
    "sigma_aleatoric_base": "--sigma-aleatoric-base", "sigma_aleatoric_noisy": "--sigma-aleatoric-noisy",
    "sigma_epistemic_base": "--sigma-epistemic-base", "sigma_epistemic_rare": "--sigma-epistemic-rare",
    "n_samples": "--samples", "seed": "--seed", "out": "--out", "sidecar": "--sidecar",
    "features_out": "--features-out", "labels_out": "--labels-out", "manifest": "--manifest",
}

_D = SimConfig()
_fraction = click.FloatRange(0.0, 1.0)
_sigma = click.FloatRange(min=0.0)


@main.command()
@click.option("--n", type=click.IntRange(min=0), default=300, show_default=True,
              help="Records per split (validation, test, calibration).")
@click.option("--n-validation", type=click.IntRange(min=0), default=None,
              help="Override the validation split size.  [default: --n]")
@click.option("--n-test", type=click.IntRange(min=0), default=None,
              help="Override the test split size.  [default: --n]")
@click.option("--n-calibration", type=click.IntRange(min=0), default=None,
              help="Override the calibration split size.  [default: --n]")
@click.option("--event-rate", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True),
              default=_D.event_rate, show_default=True, help="Target mean true risk.")
@click.option("--rare-fraction", type=_fraction, default=_D.rare_fraction, show_default=True,
              help="Probability a record comes from the displaced rare cluster.")
@click.option("--noisy-fraction", type=_fraction, default=_D.noisy_fraction, show_default=True,
              help="Fraction of records whose augmented passes carry the noisy sigma.")
@click.option("--sigma-aleatoric-base", type=_sigma, default=_D.sigma_aleatoric_base, show_default=True,
              help="Logit noise of augmented passes for clean records.")
@click.option("--sigma-aleatoric-noisy", type=_sigma, default=_D.sigma_aleatoric_noisy, show_default=True,
              help="Logit noise of augmented passes for noisy records.")
@click.option("--sigma-epistemic-base", type=_sigma, default=_D.sigma_epistemic_base, show_default=True,
              help="Logit noise of dropout passes for main-cluster records.")
@click.option("--sigma-epistemic-rare", type=_sigma, default=_D.sigma_epistemic_rare, show_default=True,
              help="Logit noise of dropout passes for rare-cluster records.")
@click.option("--samples", "n_samples", type=click.IntRange(min=1), default=_D.n_samples, show_default=True,
              help="Stochastic passes per record and method.")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True, help="Random seed.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Cohort JSONL to write.")
@click.option("--sidecar", type=click.Path(dir_okay=False), default=None,
              help="Ground-truth JSONL.  [default: <out stem>.truth.jsonl]")
@click.option("--features-out", type=click.Path(dir_okay=False), default=None,
              help="Optional feature CSV (id, x0, x1) for train-evdl.")
@click.option("--labels-out", type=click.Path(dir_okay=False), default=None,
              help="Optional label CSV (id, label) for train-evdl.")
@click.option("--manifest", type=click.Path(dir_okay=False), default=None,
              help="Run manifest.  [default: <out stem>.manifest.json]")
def simulate(n, n_validation, n_test, n_calibration, event_rate, rare_fraction, noisy_fraction,
             sigma_aleatoric_base, sigma_aleatoric_noisy, sigma_epistemic_base, sigma_epistemic_rare,
             n_samples, seed, out, sidecar, features_out, labels_out, manifest):
    """Generate a synthetic cohort plus its ground-truth sidecar."""
    try:
        cfg = SimConfig(
            n_validation=n if n_validation is None else n_validation,
            n_test=n if n_test is None else n_test,
            n_calibration=n if n_calibration is None else n_calibration,
            event_rate=event_rate, rare_fraction=rare_fraction, noisy_fraction=noisy_fraction,
            sigma_aleatoric_base=sigma_aleatoric_base, sigma_aleatoric_noisy=sigma_aleatoric_noisy,
            sigma_epistemic_base=sigma_epistemic_base, sigma_epistemic_rare=sigma_epistemic_rare,
            n_samples=n_samples, seed=seed)
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    stem = out[:-6] if out.endswith(".jsonl") else out
    sidecar = sidecar or f"{stem}.truth.jsonl"
    manifest = manifest or f"{stem}.manifest.json"
    try:
        cohort, truth = generate(cfg)
    except RuntimeError as exc:
        raise _config_error(str(exc)) from None
    outputs = [out, sidecar]
    atomic_write(out, serialize_cohort(cohort))
    atomic_write(sidecar, truth.to_jsonl())
    if features_out:
        atomic_write(features_out, truth.features_csv())
        outputs.append(features_out)
    if labels_out:
        atomic_write(labels_out, truth.labels_csv())
        outputs.append(labels_out)
    config = config_dict(cfg)
    config.update(out=out, sidecar=sidecar, features_out=features_out, labels_out=labels_out)
    _write_manifest(manifest, "simulate", config, [], outputs)
    click.echo(f"wrote {len(cohort)} records to {out} (prevalence {cohort.prevalence:.3f})")


# -- sweep --------------------------------------------------------------------

SWEEP_FLAGS = {
    "input": "--input", "input_format": "--format", "methods": "--methods",
    "percentiles": "--percentiles", "credibility_grid": "--credibility-grid", "tau": "--tau",
    "bootstrap": "--bootstrap", "seed": "--seed", "rule": "--rule",
    "calibration_split": "--calibration-split", "out": "--out",
}

_BASE_METHODS = ",".join(m.value for m in METHOD_ORDER if not m.is_vote)


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Cohort file (JSONL or CSV).")
@click.option("--format", "input_format", type=click.Choice(["auto", "jsonl", "csv"]), default="auto",
              show_default=True, help="Cohort file format.")
@click.option("--methods", default=_BASE_METHODS, show_default=True,
              help="Comma-separated scored methods to sweep (DO, TTA, Conformal, EvDL).")
@click.option("--percentiles", default="30..90:10", show_default=True,
              help="Percentile grid for DO/TTA/EvDL (lo..hi:step or comma list).")
@click.option("--credibility-grid", default="0.3..0.9:0.1", show_default=True,
              help="Absolute credibility cutoffs for Conformal.")
@click.option("--tau", type=click.FloatRange(0.0, 1.0), default=0.5, show_default=True,
              help="Decision threshold on the positive-class probability.")
@click.option("--bootstrap", type=click.IntRange(min=0), default=2000, show_default=True,
              help="Bootstrap resamples per cell (0 disables intervals).")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True, help="Random seed.")
@click.option("--rule", type=click.Choice(["both", "majority", "all", "none"]), default="both",
              show_default=True, help="Voting rows to add (need DO, TTA and Conformal).")
@click.option("--calibration-split", type=click.Choice(["calibration", "validation"]),
              default="calibration", show_default=True,
              help="Split whose records calibrate the conformal classifier.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
def sweep(input_path, input_format, methods, percentiles, credibility_grid, tau, bootstrap, seed,
          rule, calibration_split, out):
    """Run the full cutoff sweep and write tables plus figure series."""
    try:
        grid = GridConfig(parse_grid(percentiles, integer=True), parse_grid(credibility_grid))
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    votes = {"both": [MethodKind.MAJORITY, MethodKind.ALL], "majority": [MethodKind.MAJORITY],
             "all": [MethodKind.ALL], "none": []}[rule]
    wanted = [m for m in _parse_methods(methods) if not m.is_vote] + votes
    cohort = _read_cohort(input_path, input_format)
    out_dir = Path(out)
    # vote rows without all members are dropped with a warning, so validate members only if present
    checked = [m for m in wanted if not m.is_vote]
    report = validate_cohort(cohort, checked, splits=SWEEP_SPLITS)
    problems = [p for p in report.lines()
                if not (calibration_split == "validation" and p.startswith("Conformal: no calibration"))]
    if problems:
        path = out_dir / "validation_report.json"
        atomic_write(path, (json.dumps(report.to_json(), indent=2) + "\n").encode())
        raise ValidationFailure(f"cohort failed validation; report written to {path}\n" + "\n".join(problems))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            table = run_sweep(cohort, wanted, grid, tau=tau, n_resamples=bootstrap, seed=seed,
                              calibration_split=calibration_split)
        except ValueError as exc:
            raise ValidationFailure(str(exc)) from None
    for w in caught:
        click.echo(f"warning: {w.message}", err=True)

    outputs = []
    for name, data in (("sweep.csv", emit_table(table, "csv")), ("sweep.json", emit_table(table, "json"))):
        atomic_write(out_dir / name, data)
        outputs.append(out_dir / name)
    for fig in FIGURES:
        path = out_dir / f"plot_{fig}.json"
        atomic_write(path, (json.dumps(emit_plot_data(table, fig), indent=1, allow_nan=False) + "\n").encode())
        outputs.append(path)
    config = {"input": input_path, "format": input_format, "methods": [m.value for m in table.methods()],
              "percentiles": list(grid.percentiles), "credibility_grid": list(grid.credibility),
              "tau": tau, "bootstrap": bootstrap, "seed": seed, "rule": rule,
              "calibration_split": calibration_split, "out": out}
    _write_manifest(out_dir / "manifest.json", "sweep", config, [input_path], outputs)

    click.echo("baseline metrics (unstratified):")
    for m in table.methods():
        for s in SWEEP_SPLITS:
            b = table.baseline(m, s)
            vals = "  ".join(f"{k}={'NA' if b.value(k) is None else f'{b.value(k):.3f}'}"
                             for k in ("auc", "sensitivity", "specificity", "ppv", "npv"))
            click.echo(f"  {m.value:<9} {s.value:<10} n={b.n:<5} prev={b.report.prevalence:.3f}  {vals}")
    click.echo(f"wrote {len(table)} rows to {out_dir}")


# -- select-gate ----------------------------------------------------------------

SELECT_FLAGS = {"input": "--input", "method": "--method", "gain": "--gain", "metric": "--metric",
                "out": "--out", "manifest": "--manifest"}


@main.command("select-gate")
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Sweep table (sweep.csv or sweep.json).")
@click.option("--method", required=True, help="Method whose gate to select (e.g. DO, Conformal, Majority).")
@click.option("--gain", type=float, default=10.0, show_default=True,
              help="Required validation percent gain of the metric.")
@click.option("--metric", type=click.Choice(["auc", "sensitivity", "specificity", "ppv", "npv"]),
              default="auc", show_default=True, help="Metric whose gain is targeted.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Gate policy JSON to write.")
@click.option("--manifest", type=click.Path(dir_okay=False), default=None,
              help="Run manifest.  [default: <out>.manifest.json]")
def select_gate(input_path, method, gain, metric, out, manifest):
    """Pick the most retentive validation gate reaching the target gain."""
    try:
        method_kind = MethodKind.parse(method)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--method") from None
    fmt = "json" if input_path.endswith(".json") else "csv"
    try:
        with open(input_path, "rb") as fh:
            table = parse_table(fh.read(), fmt)
    except (ValueError, KeyError) as exc:
        raise ValidationFailure(f"cannot read sweep table: {exc}") from None
    choice = select_cutoff_for_gain(table, method_kind, gain, metric)
    if not isinstance(choice, GateSelection):
        best = "none" if choice.best_gain is None else f"{choice.best_gain:.2f}%"
        raise NoGate(f"no {method_kind.value} grid point reaches a {gain:g}% validation {metric} gain "
                     f"(best {best})")
    atomic_write(out, dump_gate(choice.gate).encode())
    _write_manifest(manifest or f"{out}.manifest.json", "select-gate",
                    {"input": input_path, "method": method_kind.value, "gain": gain, "metric": metric,
                     "out": out, "seed": None}, [input_path], [out])
    where = "baseline" if choice.grid_value is None else f"grid value {choice.grid_value:g}"
    click.echo(f"{method_kind.value}: {where}, retention {choice.retention:.3f}, "
               f"validation {metric} gain {choice.gain:+.2f}%")


# -- train-evdl -----------------------------------------------------------------

TRAIN_FLAGS = {"features": "--features", "labels": "--labels", "epochs": "--epochs", "lr": "--lr",
               "anneal_epochs": "--anneal-epochs", "evidence": "--evidence", "seed": "--seed",
               "out": "--out", "cohort": "--cohort", "cohort_out": "--cohort-out",
               "manifest": "--manifest"}


def _read_table_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationFailure(f"{path} is empty")
    return rows[0], [r for r in rows[1:] if r]


@main.command("train-evdl")
@click.option("--features", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Feature CSV: id column then numeric feature columns.")
@click.option("--labels", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Label CSV: id,label (same row order as --features).")
@click.option("--epochs", type=click.IntRange(min=0), default=1000, show_default=True,
              help="Full-batch gradient steps.")
@click.option("--lr", type=click.FloatRange(min=0.0, min_open=True), default=1.0, show_default=True,
              help="Learning rate.")
@click.option("--anneal-epochs", type=click.IntRange(min=1), default=10, show_default=True,
              help="Epochs over which the KL weight ramps to 1.")
@click.option("--evidence", type=click.Choice(["softplus", "relu"]), default="softplus", show_default=True,
              help="Evidence activation.")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True, help="Random seed.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Model JSON to write.")
@click.option("--cohort", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Cohort JSONL whose records get an alphas field from the model.")
@click.option("--cohort-out", type=click.Path(dir_okay=False), default=None,
              help="Where to write the alphas-merged cohort (needs --cohort).")
@click.option("--manifest", type=click.Path(dir_okay=False), default=None,
              help="Run manifest.  [default: <out>.manifest.json]")
def train_evdl(features, labels, epochs, lr, anneal_epochs, evidence, seed, out, cohort, cohort_out,
               manifest):
    """Train the desk-scale evidential classifier and emit Dirichlet alphas."""
    if (cohort is None) != (cohort_out is None):
        raise _config_error("--cohort and --cohort-out must be given together")
    f_head, f_rows = _read_table_csv(features)
    l_head, l_rows = _read_table_csv(labels)
    if len(f_rows) != len(l_rows):
        raise ValidationFailure(f"row count mismatch: {len(f_rows)} feature rows vs {len(l_rows)} label rows")
    ids = [r[0] for r in f_rows]
    if [r[0] for r in l_rows] != ids:
        raise ValidationFailure("feature and label files list different ids")
    try:
        X = np.array([[float(v) for v in r[1:]] for r in f_rows])
        y = np.array([int(r[1]) for r in l_rows])
    except (ValueError, IndexError) as exc:
        raise ValidationFailure(f"malformed feature/label row: {exc}") from None
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise ValidationFailure("features must be a finite numeric matrix")
    if np.any((y < 0) | (y > 1)):
        raise ValidationFailure("labels must be 0 or 1")
    cfg = TrainConfig(epochs=epochs, learning_rate=lr, anneal_epochs=anneal_epochs, seed=seed,
                      evidence=evidence)
    try:
        model = train(X, y, cfg)
    except FloatingPointError as exc:
        raise ValidationFailure(str(exc)) from None
    alphas = predict_alphas(model, X)
    acc = float(np.mean(np.argmax(alphas, axis=1) == y))
    outputs = [out]
    atomic_write(out, (model.to_json() + "\n").encode())
    inputs = [features, labels]
    if cohort:
        base = _read_cohort(cohort, "jsonl")
        by_id = dict(zip(ids, alphas))
        merged = []
        for r in base.records:
            a = by_id.get(r.id, r.alphas)
            merged.append(PredictionRecord(r.id, r.split, r.label, r.base_probs, r.mc_probs,
                                           r.tta_probs, a))
        atomic_write(cohort_out, serialize_cohort(Cohort(tuple(merged), base.provenance)))
        outputs.append(cohort_out)
        inputs.append(cohort)
    _write_manifest(manifest or f"{out}.manifest.json", "train-evdl",
                    {"features": features, "labels": labels, "epochs": epochs, "lr": lr,
                     "anneal_epochs": anneal_epochs, "evidence": evidence, "seed": seed, "out": out,
                     "cohort": cohort, "cohort_out": cohort_out}, inputs, outputs)
    trace = model.loss_trace
    click.echo(f"trained {epochs} epochs: loss {trace[0]:.4f} -> {trace[-1]:.4f}, "
               f"training accuracy {acc:.3f}")


if __name__ == "__main__":  # pragma: no cover
    main()
