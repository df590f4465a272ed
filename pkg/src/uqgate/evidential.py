"""Desk-scale evidential classifier: a linear model with Dirichlet outputs.

Trained with the expected squared error under the Dirichlet, its variance
term, and an annealed KL penalty that pulls misleading evidence back to the
uniform Dirichlet.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, expit, gammaln, polygamma


def softplus(z):
    z = np.asarray(z, dtype=float)
    return np.logaddexp(0.0, z)


def evidence(logits, kind: str = "softplus") -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if kind == "softplus":
        return softplus(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown evidence function {kind!r}")


def _check_alphas(alphas) -> np.ndarray:
    a = np.asarray(alphas, dtype=float)
    if np.any(a < 1.0) or not np.all(np.isfinite(a)):
        raise ValueError("alphas must be finite and >= 1")
    return a


def kl_dirichlet_uniform(alphas) -> float | np.ndarray:
    """KL(Dir(alpha) || Dir(1, ..., 1)); vectorised over leading axes."""
    a = _check_alphas(alphas)
    k = a.shape[-1]
    s = a.sum(axis=-1)
    kl = (gammaln(s) - gammaln(a).sum(axis=-1) - gammaln(k)
          + ((a - 1.0) * (digamma(a) - digamma(s)[..., None])).sum(axis=-1))
    # exact zero at the uniform Dirichlet; guard rounding below zero
    kl = np.maximum(kl, 0.0)
    return float(kl) if np.ndim(kl) == 0 else kl


def _truth_removed(alphas: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y + (1.0 - y) * alphas


def evidential_loss(alphas, y, lam: float) -> float | np.ndarray:
    a = _check_alphas(alphas)
    y = np.asarray(y, dtype=float)
    if a.shape != y.shape:
        raise ValueError("alphas and y must have the same shape")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    s = a.sum(axis=-1, keepdims=True)
    p = a / s
    fit = ((y - p) ** 2 + p * (1.0 - p) / (s + 1.0)).sum(axis=-1)
    out = fit + lam * np.asarray(kl_dirichlet_uniform(_truth_removed(a, y)))
    return float(out) if np.ndim(out) == 0 else out


def _loss_grad_alpha(a: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """d loss / d alpha for a batch of (N, K) rows."""
    k = a.shape[-1]
    s = a.sum(axis=-1, keepdims=True)
    p = a / s
    g = -2.0 * (y - p) + (1.0 - 2.0 * p) / (s + 1.0)
    d_s = -(p * (1.0 - p)).sum(axis=-1, keepdims=True) / (s + 1.0) ** 2
    grad = (g - (g * p).sum(axis=-1, keepdims=True)) / s + d_s
    at = _truth_removed(a, y)
    st = at.sum(axis=-1, keepdims=True)
    d_kl = (at - 1.0) * polygamma(1, at) - (st - k) * polygamma(1, st)
    return grad + lam * (1.0 - y) * d_kl


def anneal(epoch: int, anneal_epochs: int = 10) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return min(1.0, epoch / anneal_epochs)


@dataclass
class TrainConfig:
    epochs: int = 1000
    learning_rate: float = 1.0
    anneal_epochs: int = 10
    seed: int = 0
    full_batch: bool = True
    evidence: str = "softplus"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.anneal_epochs <= 0:
            raise ValueError("anneal_epochs must be positive")
        if not self.full_batch:
            raise ValueError("only full-batch training is supported")
        if self.evidence not in ("softplus", "relu"):
            raise ValueError(f"unknown evidence function {self.evidence!r}")


@dataclass
class EvidentialModel:
    W: np.ndarray
    b: np.ndarray
    evidence_kind: str = "softplus"
    loss_trace: list[float] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def n_features(self) -> int:
        return self.W.shape[1]

    @classmethod
    def zeros(cls, n_classes: int, n_features: int, evidence_kind: str = "softplus") -> "EvidentialModel":
        if n_classes < 2:
            raise ValueError("need at least two classes")
        return cls(np.zeros((n_classes, n_features)), np.zeros(n_classes), evidence_kind)

    def logits(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[-1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        return X @ self.W.T + self.b

    def to_json(self) -> str:
        return json.dumps({"W": self.W.tolist(), "b": self.b.tolist(),
                           "evidence": self.evidence_kind})

    @classmethod
    def from_json(cls, text: str) -> "EvidentialModel":
        obj = json.loads(text)
        return cls(np.asarray(obj["W"], dtype=float), np.asarray(obj["b"], dtype=float),
                   obj.get("evidence", "softplus"))


def predict_alphas(model: EvidentialModel, features) -> np.ndarray:
    """Dirichlet parameters for one feature vector or an (N, D) batch."""
    return evidence(model.logits(features), model.evidence_kind) + 1.0


def mean_loss(model: EvidentialModel, X, Y, lam: float) -> float:
    return float(np.mean(evidential_loss(predict_alphas(model, X), Y, lam)))


def loss_gradients(model: EvidentialModel, X, Y, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the mean evidential loss w.r.t. (W, b)."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    z = model.logits(X)
    if model.evidence_kind == "softplus":
        de_dz = expit(z)
    else:
        de_dz = (z > 0).astype(float)
    a = evidence(z, model.evidence_kind) + 1.0
    dz = _loss_grad_alpha(a, Y, lam) * de_dz / X.shape[0]
    return dz.T @ X, dz.sum(axis=0)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    return np.eye(n_classes)[labels]


def train(features, labels, config: TrainConfig | None = None, n_classes: int = 2) -> EvidentialModel:
    """Full-batch gradient descent from a zero initialisation.

    ``labels`` may be class indices or a one-hot matrix. The returned model
    carries ``loss_trace``: the loss before training followed by the loss
    after every epoch, each at that epoch's annealing weight.
    """
    config = config or TrainConfig()
    X = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    Y = labels.astype(float) if labels.ndim == 2 else one_hot(labels, n_classes)
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError("features and labels must have matching rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    model = EvidentialModel.zeros(Y.shape[1], X.shape[1], config.evidence)
    trace = [mean_loss(model, X, Y, anneal(0, config.anneal_epochs))]
    for epoch in range(config.epochs):
        lam = anneal(epoch, config.anneal_epochs)
        gW, gb = loss_gradients(model, X, Y, lam)
        with np.errstate(over="ignore", invalid="ignore"):
            model.W = model.W - config.learning_rate * gW
            model.b = model.b - config.learning_rate * gb
            finite = np.all(np.isfinite(model.W)) and np.all(np.isfinite(model.logits(X)))
        loss = mean_loss(model, X, Y, lam) if finite else math.nan
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        trace.append(loss)
    model.loss_trace = trace
    return model
