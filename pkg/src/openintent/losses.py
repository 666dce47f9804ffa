"""Training objectives and their gradients with respect to class scores.

Three heads are supported: standard softmax cross-entropy, the large margin
cosine loss over normalized cosine scores, and a one-vs-rest sigmoid loss used
by the per-class-threshold baseline.  All functions are pure and operate in
double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COSINE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LmclConfig:
    """Scaling factor and cosine margin of the margin loss."""
    s: float = 30.0
    m: float = 0.35

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError(f"scaling factor must be positive, got {self.s}")
        if not 0.0 <= self.m < 1.0:
            raise ValueError(f"margin must lie in [0, 1), got {self.m}")


@dataclass(frozen=True)
class LossOutput:
    value: float                  # mean over the batch
    score_gradients: np.ndarray   # n x C, d(value)/d(scores)


def _check_labels(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    n, C = scores.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError("label index outside [0, C)")
    return labels


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_ce(logits: np.ndarray, labels: np.ndarray) -> LossOutput:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    n = logits.shape[0]
    logp = _log_softmax(logits)
    value = float(-logp[np.arange(n), labels].mean())
    grads = np.exp(logp)
    grads[np.arange(n), labels] -= 1.0
    return LossOutput(value, grads / n)


def lmcl(cosines: np.ndarray, labels: np.ndarray, cfg: LmclConfig) -> LossOutput:
    """Margin loss over cosine scores: the true-class cosine is reduced by the
    margin before scaling, all classes share the scale factor.

    Computed per example as logsumexp over the adjusted, scaled scores minus
    the true-class term, which stays finite at large scale factors.
    """
    cosines = np.asarray(cosines, dtype=np.float64)
    labels = _check_labels(cosines, labels)
    if cosines.size and (cosines.min() < -1.0 - COSINE_TOLERANCE
                         or cosines.max() > 1.0 + COSINE_TOLERANCE):
        raise ValueError("cosine scores outside [-1, 1]: upstream "
                         "normalization is broken")
    n = cosines.shape[0]
    rows = np.arange(n)
    adjusted = cfg.s * cosines
    adjusted[rows, labels] -= cfg.s * cfg.m

    peak = adjusted.max(axis=1, keepdims=True)
    expd = np.exp(adjusted - peak)
    lse = np.log(expd.sum(axis=1)) + peak[:, 0]
    value = float((lse - adjusted[rows, labels]).mean())

    grads = expd / expd.sum(axis=1, keepdims=True)
    grads[rows, labels] -= 1.0
    return LossOutput(value, cfg.s * grads / n)


def sigmoid_bce(logits: np.ndarray, labels: np.ndarray) -> LossOutput:
    """One-vs-rest binary cross-entropy over per-class sigmoid outputs.

    Each class is a binary target (1 for the true class, 0 otherwise); the
    per-example loss is summed over classes, then averaged over the batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    n = logits.shape[0]
    targets = np.zeros_like(logits)
    targets[np.arange(n), labels] = 1.0
    # stable form of -t*log(sigmoid(x)) - (1-t)*log(1-sigmoid(x))
    per_entry = (np.maximum(logits, 0.0) - logits * targets
                 + np.log1p(np.exp(-np.abs(logits))))
    value = float(per_entry.sum(axis=1).mean())
    probs = sigmoid(logits)
    return LossOutput(value, (probs - targets) / n)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
