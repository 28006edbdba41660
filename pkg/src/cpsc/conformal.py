"""Split conformal prediction for classification.

Nonconformity is ``1 - p[y]``; the threshold is an exact order statistic of the
calibration scores, never an interpolated quantile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, DimensionError

# (n+1)(1-alpha) within this distance of an integer is treated as that integer,
# so alpha=0.3 with n+1=10 gives rank 7 rather than 8 from binary round-off.
_RANK_TOL = 1e-9


def nonconformity(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return 1.0 - float(probs[label])


def quantile_rank(n: int, alpha: float) -> int:
    """1-based rank ceil((n+1)(1-alpha)) of the calibration order statistic."""
    return math.ceil((n + 1) * (1.0 - alpha) - _RANK_TOL)


def calibrate(scores, alpha: float) -> float:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise CalibrationError("cannot calibrate on an empty score list")
    if not 0.0 < alpha < 1.0:
        raise CalibrationError(f"alpha must lie in (0, 1), got {alpha}")
    k = quantile_rank(scores.size, alpha)
    if k > scores.size:
        return 1.0
    return float(np.sort(scores)[max(k, 1) - 1])


@dataclass(frozen=True)
class ConformalState:
    alpha: float
    cal_scores: np.ndarray
    q_hat: float
    version: int = 0

    @classmethod
    def from_scores(cls, scores, alpha: float, version: int = 0) -> "ConformalState":
        scores = np.array(scores, dtype=np.float64).reshape(-1)
        return cls(alpha=alpha, cal_scores=scores, q_hat=calibrate(scores, alpha), version=version)


@dataclass
class PredictionSet:
    members: list[tuple[int, float]] = field(default_factory=list)
    q_used: float = 1.0

    @property
    def labels(self) -> list[int]:
        return [c for c, _ in self.members]

    def __len__(self):
        return len(self.members)

    def __contains__(self, label):
        return label in self.labels


def prediction_set(probs, q_hat: float) -> PredictionSet:
    probs = np.asarray(probs, dtype=np.float64)
    scored = [(1.0 - float(p), c) for c, p in enumerate(probs)]
    members = sorted((s, c) for s, c in scored if s <= q_hat)
    return PredictionSet([(c, s) for s, c in members], q_hat)


def rank_reliability(probs, q_hat: float, target: int) -> float:
    """``1 - rank/|C|`` of ``target`` inside its prediction set, 0 when absent."""
    pset = prediction_set(probs, q_hat)
    labels = pset.labels
    if target not in labels:
        return 0.0
    return 1.0 - (labels.index(target) + 1) / len(labels)


def rank_reliability_batch(probs: np.ndarray, q_hat: float, targets) -> np.ndarray:
    """Row-wise ``rank_reliability`` by counting instead of sorting.

    ``probs`` may carry extra leading axes; ``targets`` broadcasts against them.
    """
    scores = 1.0 - np.asarray(probs, dtype=np.float64)
    k = scores.shape[-1]
    targets = np.broadcast_to(np.asarray(targets), scores.shape[:-1])
    t_score = np.take_along_axis(scores, targets[..., None], axis=-1)
    in_set = scores <= q_hat
    idx = np.arange(k)
    ahead = in_set & ((scores < t_score) | ((scores == t_score) & (idx < targets[..., None])))
    rank = ahead.sum(axis=-1) + 1
    size = in_set.sum(axis=-1)
    target_in = t_score[..., 0] <= q_hat
    out = np.zeros(scores.shape[:-1])
    np.subtract(1.0, rank / np.maximum(size, 1), out=out, where=target_in)
    return out


def coverage_audit(prob_rows, labels, q_hat: float) -> tuple[float, float]:
    probs = np.asarray(prob_rows, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise DimensionError(f"{probs.shape[0] if probs.ndim else 0} prob rows vs {labels.shape[0]} labels")
    if labels.shape[0] == 0:
        raise DimensionError("coverage audit needs at least one sample")
    in_set = (1.0 - probs) <= q_hat
    covered = in_set[np.arange(labels.shape[0]), labels]
    return float(covered.mean()), float(in_set.sum(axis=1).mean())


COVERAGE_COLUMNS = ["epoch", "alpha", "q_hat", "coverage", "mean_set_size"]


def coverage_row(epoch: int, state: ConformalState, coverage: float, mean_set_size: float) -> dict:
    return {
        "epoch": epoch,
        "alpha": state.alpha,
        "q_hat": state.q_hat,
        "coverage": coverage,
        "mean_set_size": mean_set_size,
    }
