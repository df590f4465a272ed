"""Synthetic cohorts with known risk and known injected uncertainty.

Features come from a main Gaussian cluster plus a small displaced "rare"
cluster that sits on the decision boundary far from the training mass.
Each record's samples are logistic(clean logit + Gaussian noise), so
entropy rises with the injected sigma while every row stays a valid
probability vector. Ground truth goes to a sidecar and never into the
cohort the pipeline reads.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .cohort import Cohort, PredictionRecord, Split

_SPLIT_ORDER = (Split.VALIDATION, Split.TEST, Split.CALIBRATION)


@dataclass(frozen=True)
class SimConfig:
    n_validation: int = 300
    n_test: int = 300
    n_calibration: int = 300
    event_rate: float = 0.42
    rare_fraction: float = 0.03
    noisy_fraction: float = 0.5
    sigma_aleatoric_base: float = 0.2
    sigma_aleatoric_noisy: float = 12.0
    sigma_epistemic_base: float = 0.2
    sigma_epistemic_rare: float = 12.0
    n_samples: int = 300
    seed: int = 0
    # generative constants; not tuning knobs for the acceptance properties
    weight: float = 2.5
    rare_offset: float = 6.0
    rare_spread: float = 0.3
    evidence_scale: float = 20.0

    def __post_init__(self):
        for name in ("event_rate", "rare_fraction", "noisy_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.event_rate < 1.0:
            raise ValueError("event_rate must lie strictly between 0 and 1")
        for name in ("sigma_aleatoric_base", "sigma_aleatoric_noisy",
                     "sigma_epistemic_base", "sigma_epistemic_rare"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("n_validation", "n_test", "n_calibration"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_total < 1:
            raise ValueError("need at least one record")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    @property
    def n_total(self) -> int:
        return self.n_validation + self.n_test + self.n_calibration


@dataclass
class GroundTruth:
    ids: list[str]
    true_risk: np.ndarray
    sigma_aleatoric: np.ndarray
    sigma_epistemic: np.ndarray
    is_rare: np.ndarray
    # model inputs, kept here so a desk-scale evidential model can be trained on them
    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    intercept: float = 0.0

    def to_jsonl(self) -> bytes:
        lines = []
        for i, rid in enumerate(self.ids):
            lines.append(json.dumps({
                "id": rid, "true_risk": float(self.true_risk[i]),
                "sigma_aleatoric": float(self.sigma_aleatoric[i]),
                "sigma_epistemic": float(self.sigma_epistemic[i]),
                "is_rare": bool(self.is_rare[i])}, separators=(",", ":")))
        return ("\n".join(lines) + "\n").encode()

    def features_csv(self) -> bytes:
        d = self.features.shape[1]
        out = ["id," + ",".join(f"x{j}" for j in range(d))]
        for rid, row in zip(self.ids, self.features):
            out.append(rid + "," + ",".join(repr(float(v)) for v in row))
        return ("\n".join(out) + "\n").encode()

    def labels_csv(self) -> bytes:
        out = ["id,label"] + [f"{rid},{int(y)}" for rid, y in zip(self.ids, self.labels)]
        return ("\n".join(out) + "\n").encode()


def _record_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0, index))))


def _intercept(weight: float, x0: np.ndarray, rare: np.ndarray, rare_z0: np.ndarray,
               rare_spread: float, target: float) -> float:
    """Bisection on the intercept so the mean true risk hits ``target``.

    Rare records sit on the decision boundary, so their risk does not move
    with the intercept; the mean is still monotone in it.
    """
    def mean_risk(b):
        ell = np.where(rare, weight * rare_spread * rare_z0, weight * x0 + b)
        return float(expit(ell).mean())

    lo, hi = -50.0, 50.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if mean_risk(mid) < target:
            lo = mid
        else:
            hi = mid
        if abs(mean_risk(mid) - target) < 1e-9:
            return mid
    b = 0.5 * (lo + hi)
    if abs(mean_risk(b) - target) > 0.01:
        raise RuntimeError(f"intercept bisection could not reach event rate {target}")
    return b


def generate(config: SimConfig) -> tuple[Cohort, GroundTruth]:
    n, t = config.n_total, config.n_samples
    z = np.empty((n, 2))
    u_rare = np.empty(n)
    u_noisy = np.empty(n)
    u_label = np.empty(n)
    eps_mc = np.empty((n, t))
    eps_tta = np.empty((n, t))
    for i in range(n):
        g = _record_stream(config.seed, i)
        u_rare[i], u_noisy[i], u_label[i] = g.random(3)
        z[i] = g.standard_normal(2)
        eps_mc[i] = g.standard_normal(t)
        eps_tta[i] = g.standard_normal(t)
    rare = u_rare < config.rare_fraction
    noisy = u_noisy < config.noisy_fraction

    w = config.weight
    b = _intercept(w, z[:, 0], rare, z[:, 0], config.rare_spread, config.event_rate)
    x = z.copy()
    x[rare, 0] = -b / w + config.rare_spread * z[rare, 0]
    x[rare, 1] = config.rare_offset + config.rare_spread * z[rare, 1]
    ell = w * x[:, 0] + b
    risk = expit(ell)
    labels = (u_label < risk).astype(int)

    sig_ep = np.where(rare, config.sigma_epistemic_rare, config.sigma_epistemic_base)
    sig_al = np.where(noisy, config.sigma_aleatoric_noisy, config.sigma_aleatoric_base)
    p_mc = expit(ell[:, None] + sig_ep[:, None] * eps_mc)
    p_tta = expit(ell[:, None] + sig_al[:, None] * eps_tta)
    proximity = np.exp(-np.sum(x ** 2, axis=1) / 2.0)

    split_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(1,))))
    counts = (config.n_validation, config.n_test, config.n_calibration)
    splits = np.repeat(np.arange(3), counts)
    split_rng.shuffle(splits)

    ids = [f"r{i:06d}" for i in range(n)]
    records = []
    for i in range(n):
        base = np.array([1.0 - risk[i], risk[i]])
        alphas = 1.0 + config.evidence_scale * base * proximity[i]
        records.append(PredictionRecord(
            id=ids[i], split=_SPLIT_ORDER[splits[i]], label=int(labels[i]), base_probs=base,
            mc_probs=np.stack([1.0 - p_mc[i], p_mc[i]], axis=1),
            tta_probs=np.stack([1.0 - p_tta[i], p_tta[i]], axis=1),
            alphas=alphas))
    cohort = Cohort(tuple(records), provenance=f"simulator seed={config.seed}")
    truth = GroundTruth(ids, risk, sig_al, sig_ep, rare, x, labels, b)
    return cohort, truth


def describe(truth: GroundTruth) -> dict:
    rare = np.asarray(truth.is_rare, dtype=bool)
    out = {"n": len(truth.ids), "rare_count": int(rare.sum()), "main_count": int((~rare).sum()),
           "mean_true_risk": float(np.mean(truth.true_risk)),
           "mean_sigma_aleatoric": float(np.mean(truth.sigma_aleatoric)),
           "mean_sigma_epistemic": float(np.mean(truth.sigma_epistemic))}
    for name, mask in (("rare", rare), ("main", ~rare)):
        out[name] = {
            "count": int(mask.sum()),
            "mean_true_risk": float(np.mean(truth.true_risk[mask])) if mask.any() else None,
            "mean_sigma_aleatoric": float(np.mean(truth.sigma_aleatoric[mask])) if mask.any() else None,
            "mean_sigma_epistemic": float(np.mean(truth.sigma_epistemic[mask])) if mask.any() else None,
        }
    return out


def config_dict(config: SimConfig) -> dict:
    return asdict(config)
