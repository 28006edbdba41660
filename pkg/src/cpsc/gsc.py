"""Gradient self-calibration: per-sample, per-modality loss weights from
conformal reliability against the fused prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conformal import ConformalState, rank_reliability_batch
from .errors import CalibrationError, ConfigError, DimensionError, StatisticsError
from .numeric import one_hot, softmax


@dataclass
class GscConfig:
    a: float = 1.0
    b: float = 0.5

    def __post_init__(self):
        if self.b < 0 or self.a + self.b < 0:
            raise ConfigError(f"w(rho) = {self.a}*rho + {self.b} must be non-negative on [0, 1]")


def weight(rho, cfg: GscConfig):
    if np.ndim(rho) == 0:
        return cfg.a * float(rho) + cfg.b
    return cfg.a * np.asarray(rho, dtype=np.float64) + cfg.b


def fused_label(fused_probs) -> np.ndarray:
    # argmax returns the first maximum, i.e. the smallest class index on ties
    return np.argmax(np.asarray(fused_probs), axis=-1)


def modality_reliability(model, conformal: ConformalState, feats, fused_probs):
    """``rho`` of shape ``(B, M)`` and the fused labels ``y'`` it was scored against."""
    if conformal is None or conformal.cal_scores.size == 0:
        raise CalibrationError("conformal predictor is not calibrated")
    y_prime = fused_label(fused_probs)
    rho = np.stack(
        [rank_reliability_batch(model.unimodal_predict(m, f), conformal.q_hat, y_prime) for m, f in enumerate(feats)],
        axis=-1,
    )
    return rho, y_prime


def unimodal_dlogits(cache, labels, weights) -> list[np.ndarray]:
    """Seeds ``(1/|B|) * w_i^m * (p_i^m - onehot(y_i))`` for each modality head."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    B = labels.shape[0]
    M = len(cache.uni_logits)
    if weights.shape != (B, M):
        raise DimensionError(f"weights shape {weights.shape} != ({B}, {M})")
    out = []
    for m in range(M):
        probs = softmax(cache.uni_logits[m])
        out.append(weights[:, m : m + 1] * (probs - one_hot(labels, probs.shape[1])) / B)
    return out


def weighted_unimodal_backward(model, cache, labels, weights) -> None:
    """Accumulate the weighted mean unimodal cross-entropy gradient into ``model``."""
    model.backward(cache, uni_dlogits=unimodal_dlogits(cache, labels, weights))


def per_sample_head_grads(cache, labels, m: int) -> np.ndarray:
    """Flattened per-sample gradients of CE w.r.t. modality ``m``'s head (W, b)."""
    probs = softmax(cache.uni_logits[m])
    err = probs - one_hot(labels, probs.shape[1])
    gw = np.einsum("bk,bd->bkd", err, cache.feats[m]).reshape(err.shape[0], -1)
    return np.concatenate([gw, err], axis=1)


def variance_diagnostic(gradient_samples, weights) -> tuple[float, float]:
    """Trace of covariance of mean-normalised weighted vs. plain per-sample gradients."""
    g = np.asarray(gradient_samples, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if g.ndim != 2 or g.shape[0] < 2:
        raise StatisticsError("need at least two gradient samples")
    if w.shape[0] != g.shape[0]:
        raise DimensionError("one weight per gradient sample required")
    mean_w = w.mean()
    scaled = g * (w / mean_w)[:, None] if mean_w > 0 else np.zeros_like(g)
    weighted = float(np.var(scaled, axis=0, ddof=1).sum())
    unweighted = float(np.var(g, axis=0, ddof=1).sum())
    return weighted, unweighted


GSC_COLUMNS = ["epoch", "modality", "mean_rho", "mean_w", "weighted_var", "unweighted_var"]
