"""Representation self-calibration.

Components of each modality feature are scored by where the true label lands
in their conformal prediction set; the top-K are averaged into the feature that
the heads consume during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conformal import ConformalState, rank_reliability_batch
from .errors import CalibrationError, ConfigError, DimensionError, NumericError
from .numeric import log_softmax


@dataclass
class DiversityLossTerms:
    lambda1: float
    lambda2: float
    consistency: float
    diversity: float
    total: float


def diversity_loss_batch(h: np.ndarray, comps: np.ndarray, lam1: float, lam2: float):
    """Batch-mean diversity loss and its gradients.

    Returns ``(total, consistency, diversity, dh, dcomps)`` where the first
    three are per-sample arrays ``(B,)`` and the gradients are of
    ``mean(total)`` w.r.t. ``h`` ``(B, d)`` and ``comps`` ``(B, n, d)``.
    """
    h = np.asarray(h, dtype=np.float64)
    comps = np.asarray(comps, dtype=np.float64)
    if comps.ndim != 3 or h.ndim != 2 or comps.shape[0] != h.shape[0] or comps.shape[2] != h.shape[1]:
        raise DimensionError(f"incompatible shapes h{h.shape} comps{comps.shape}")
    B, n, _ = comps.shape
    if n < 2:
        raise ConfigError("diversity loss needs at least two components")

    lp_h = log_softmax(h)
    p_h = np.exp(lp_h)
    lp_c = log_softmax(comps)
    p_c = np.exp(lp_c)

    # KL(P(h) || P(c_k)) for each k
    kl_hc = np.einsum("bd,bnd->bn", p_h, lp_h[:, None, :] - lp_c)
    consistency = kl_hc.mean(axis=1)

    # KL(P(c_i) || P(c_j)) over ordered pairs
    neg_ent = np.einsum("bnd,bnd->bn", p_c, lp_c)
    cross = np.einsum("bid,bjd->bij", p_c, lp_c)
    kl_cc = neg_ent[:, :, None] - cross
    off = ~np.eye(n, dtype=bool)
    diversity = kl_cc[:, off].sum(axis=1) / (n * (n - 1))

    total = lam1 * consistency - lam2 * diversity

    # gradients of mean(total)
    g = lp_h - lp_c.mean(axis=1)
    dh = p_h * (g - np.sum(p_h * g, axis=1, keepdims=True))
    dcomps = lam1 * (p_c - p_h[:, None, :]) / n

    s = lp_c.sum(axis=1, keepdims=True)
    gi = n * lp_c - s
    d_first = p_c * (gi - np.sum(p_c * gi, axis=2, keepdims=True))
    d_second = n * p_c - p_c.sum(axis=1, keepdims=True)
    dcomps = dcomps - lam2 * (d_first + d_second) / (n * (n - 1))
    dh = lam1 * dh
    return total, consistency, diversity, dh / B, dcomps / B


def diversity_loss(h, components, lam1: float = 0.8, lam2: float = 0.2) -> DiversityLossTerms:
    h = np.asarray(h, dtype=np.float64)
    comps = np.asarray(components, dtype=np.float64)
    if comps.ndim != 2:
        raise DimensionError("components must be an (n, d) array")
    total, c, d, _, _ = diversity_loss_batch(h[None], comps[None], lam1, lam2)
    return DiversityLossTerms(lam1, lam2, float(c[0]), float(d[0]), float(total[0]))


def _require(conformal):
    if conformal is None or conformal.cal_scores.size == 0:
        raise CalibrationError("conformal predictor is not calibrated")


def component_probs(model, m: int, comps: np.ndarray) -> np.ndarray:
    return model.unimodal_predict(m, comps)


def score_components(model, conformal: ConformalState, m: int, components, true_label):
    """Reliability of each component for its sample's ground-truth label.

    ``components`` is ``(n, d)`` with a scalar label or ``(B, n, d)`` with ``(B,)`` labels.
    """
    _require(conformal)
    comps = np.asarray(components, dtype=np.float64)
    probs = component_probs(model, m, comps)
    labels = np.asarray(true_label)
    if comps.ndim == 3:
        labels = labels[:, None]
    return rank_reliability_batch(probs, conformal.q_hat, labels)


def select_topk(reliability: np.ndarray, k_sel: int, fallback: np.ndarray | None = None) -> np.ndarray:
    """Indices ``(B, k_sel)`` of the largest reliabilities; ties go to the smaller index.

    Rows whose reliabilities are all zero use ``fallback`` (lower is better)
    when it is given.
    """
    rel = np.atleast_2d(np.asarray(reliability, dtype=np.float64))
    if not 1 <= k_sel <= rel.shape[1]:
        raise ConfigError(f"k_sel={k_sel} outside [1, {rel.shape[1]}]")
    order = np.argsort(-rel, axis=1, kind="stable")
    if fallback is not None:
        fb = np.atleast_2d(np.asarray(fallback, dtype=np.float64))
        dead = ~np.any(rel > 0, axis=1)
        if dead.any():
            order[dead] = np.argsort(fb[dead], axis=1, kind="stable")
    return order[:, :k_sel]


def selection_coef(selected: np.ndarray, n: int) -> np.ndarray:
    k_sel = selected.shape[1]
    coef = np.zeros((selected.shape[0], n))
    np.put_along_axis(coef, selected, 1.0 / k_sel, axis=1)
    return coef


def uniform_coef(batch: int, n: int) -> np.ndarray:
    return selection_coef(np.tile(np.arange(n), (batch, 1)), n)


def reconstruct_topk(components, reliability, k_sel: int, fallback=None):
    """Average of the ``k_sel`` most reliable components.

    Returns ``(h_tilde, selected)``; batched inputs give ``(B, d)`` and ``(B, k_sel)``.
    """
    comps = np.asarray(components, dtype=np.float64)
    single = comps.ndim == 2
    comps3 = comps[None] if single else comps
    selected = select_topk(reliability, k_sel, fallback)
    if selected.shape[0] != comps3.shape[0]:
        raise DimensionError("reliability rows do not match components")
    coef = selection_coef(selected, comps3.shape[1])
    h_tilde = np.einsum("bn,bnd->bd", coef, comps3)
    if single:
        return h_tilde[0], selected[0]
    return h_tilde, selected


def proposition1_check(components, selected, h_star) -> tuple[float, float]:
    """Distance of the selected mean to ``h_star`` vs. mean distance of the selected components."""
    comps = np.asarray(components, dtype=np.float64)[np.asarray(selected)]
    h_star = np.asarray(h_star, dtype=np.float64)
    lhs = float(np.linalg.norm(comps.mean(axis=0) - h_star))
    rhs = float(np.mean(np.linalg.norm(comps - h_star, axis=1)))
    if lhs > rhs + 1e-12:
        raise NumericError(f"convexity bound violated: {lhs} > {rhs}")
    return lhs, rhs


HISTOGRAM_COLUMNS = ["epoch", "modality", "bin_lo", "bin_hi", "count"]


def reliability_histogram(values, bins: int = 10) -> list[tuple[float, float, int]]:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64).reshape(-1), bins=bins, range=(0.0, 1.0))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
