"""Training loop: warm-up, self-calibrating epochs, conformal refresh, inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import gsc, rsc
from .conformal import ConformalState, coverage_audit, rank_reliability_batch
from .data import Dataset
from .errors import CalibrationError, ConfigError, DimensionError, NumericError
from .model import CpscModel, ForwardCache
from .numeric import EPS_KL, OptimizerKind, one_hot, softmax

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    warmup_epochs: int = 5
    epochs: int = 60
    batch_size: int = 32
    alpha: float = 0.1
    cp_update_interval: int = 1
    optimizer: OptimizerKind = field(
        default_factory=lambda: OptimizerKind("sgd", lr=0.005, momentum=0.9, weight_decay=1e-3)
    )
    lambda1: float = 0.8
    lambda2: float = 0.2
    a: float = 1.0
    b: float = 0.5
    seed: int = 0
    calibration_fraction: float = 0.2
    method: str = "cpsc"  # or "baseline"
    update: str = "batch"  # or "epoch"
    refresh_path: str = "fused"  # or "rsc"
    grad_clip: float | None = 5.0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerKind(**self.optimizer)
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if self.cp_update_interval < 1:
            raise ConfigError("cp_update_interval must be >= 1")
        if not 0 < self.calibration_fraction <= 0.5:
            raise ConfigError("calibration_fraction must lie in (0, 0.5]")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.method not in ("cpsc", "baseline"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.update not in ("batch", "epoch"):
            raise ConfigError("update must be 'batch' or 'epoch'")
        if self.refresh_path not in ("fused", "rsc"):
            raise ConfigError("refresh_path must be 'fused' or 'rsc'")
        gsc.GscConfig(self.a, self.b)

    @property
    def gsc(self) -> gsc.GscConfig:
        return gsc.GscConfig(self.a, self.b)


@dataclass
class EpochReport:
    epoch: int
    phase: str
    loss_total: float
    loss_mul: float
    loss_uni: list[float]
    loss_div: list[float]
    acc_fused: float
    acc_uni: list[float]
    cp_version: int = -1
    q_hat: float = math.nan
    coverage: float = math.nan
    mean_set_size: float = math.nan
    mean_rho: list[float] = field(default_factory=list)
    mean_w: list[float] = field(default_factory=list)
    test_acc_fused: float = math.nan
    test_acc_uni: list[float] = field(default_factory=list)

    def row(self) -> dict:
        out = {}
        for key, val in self.__dict__.items():
            if isinstance(val, list):
                for m, v in enumerate(val):
                    out[f"{key}_{m}"] = v
            else:
                out[key] = val
        return out


@dataclass
class TrainResult:
    reports: list[EpochReport]
    conformal: ConformalState
    warmup_conformal: ConformalState | None
    gsc_rows: list[dict] = field(default_factory=list)
    histogram_rows: list[dict] = field(default_factory=list)
    coverage_rows: list[dict] = field(default_factory=list)


def split_data(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified random split into (train, cal); cal gets ``round(fraction * N)`` samples."""
    if not 0 < fraction <= 0.5:
        raise ConfigError("calibration fraction must lie in (0, 0.5]")
    n = len(ds)
    if n < 2 / fraction:
        raise ConfigError(f"dataset of {n} samples is too small for fraction {fraction}")
    rng = np.random.default_rng([seed, 4])
    classes = np.unique(ds.labels)
    counts = np.array([np.sum(ds.labels == c) for c in classes])
    exact = fraction * counts
    quota = np.floor(exact).astype(int)
    short = int(round(fraction * n)) - quota.sum()
    # largest remainder keeps every class within one of its exact share
    for i in np.argsort(-(exact - quota), kind="stable")[:short]:
        quota[i] += 1
    cal_idx = []
    for c, q in zip(classes, quota):
        idx = np.flatnonzero(ds.labels == c)
        cal_idx.append(rng.permutation(idx)[:q])
    cal_idx = np.sort(np.concatenate(cal_idx))
    mask = np.zeros(n, dtype=bool)
    mask[cal_idx] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(cal_idx)


def _ce_terms(logits, labels):
    """Per-sample CE and ``softmax - onehot``."""
    probs = softmax(logits)
    ce = -np.log(np.maximum(probs[np.arange(labels.shape[0]), labels], EPS_KL))
    return ce, probs - one_hot(labels, probs.shape[1]), probs


# losses for one batch


def loss_and_backward(model: CpscModel, cache: ForwardCache, labels, weights, lam1, lam2, backward=True) -> dict:
    """Total objective ``CE_mul + sum_m div_m + sum_m mean(w * CE_m)`` on a filled cache."""
    labels = np.asarray(labels)
    B = labels.shape[0]
    M = model.config.modality_count
    ce_mul, err_mul, probs = _ce_terms(cache.fused_logits, labels)
    terms = {"mul": float(ce_mul.mean()), "uni": [], "div": [], "fused_probs": probs}
    uni_seeds, dcomps, dh = [], [None] * M, [None] * M
    total = terms["mul"]
    for m in range(M):
        ce, err, p_m = _ce_terms(cache.uni_logits[m], labels)
        w = weights[:, m]
        terms["uni"].append(float(ce.mean()))
        total += float(np.mean(w * ce))
        uni_seeds.append(w[:, None] * err / B)
        if lam1 or lam2:
            div, _, _, g_h, g_c = rsc.diversity_loss_batch(cache.h[m], cache.comps[m], lam1, lam2)
            terms["div"].append(float(div.mean()))
            total += float(div.mean())
            dh[m], dcomps[m] = g_h, g_c
        else:
            terms["div"].append(0.0)
    terms["total"] = total
    if backward:
        model.backward(cache, fused_dlogits=err_mul / B, uni_dlogits=uni_seeds, dcomps=dcomps, dh=dh)
    return terms


def cpsc_loss(model: CpscModel, xs, labels, coef, weights, lam1, lam2, backward=False) -> dict:
    """Objective with a fixed component selection and fixed GSC weights."""
    cache = model.forward_encode(xs, decompose=True)
    model.forward_heads(cache, coef)
    return loss_and_backward(model, cache, labels, np.asarray(weights, dtype=np.float64), lam1, lam2, backward)


def select_components(model: CpscModel, conformal: ConformalState, cache: ForwardCache, labels):
    """Per-modality selection coefficients and raw component reliabilities."""
    coefs, rels = [], []
    labels = np.asarray(labels)
    n = model.config.component_count
    for m in range(model.config.modality_count):
        comps = cache.comps[m]
        probs = model.unimodal_predict(m, comps)
        rel = rank_reliability_batch(probs, conformal.q_hat, labels[:, None])
        fallback = 1.0 - probs[np.arange(labels.shape[0]), :, labels]
        sel = rsc.select_topk(rel, model.config.top_k, fallback)
        coefs.append(rsc.selection_coef(sel, n))
        rels.append(rel)
    return coefs, rels


def cpsc_batch(model: CpscModel, conformal: ConformalState, xs, labels, cfg: TrainConfig) -> dict:
    if conformal is None:
        raise CalibrationError("self-calibration step needs a calibrated conformal predictor")
    cache = model.forward_encode(xs, decompose=True)
    coefs, rels = select_components(model, conformal, cache, labels)
    model.forward_heads(cache, coefs)
    rho, y_prime = gsc.modality_reliability(model, conformal, cache.feats, cache.fused_probs)
    weights = gsc.weight(rho, cfg.gsc)
    terms = loss_and_backward(model, cache, labels, weights, cfg.lambda1, cfg.lambda2)
    terms.update(cache=cache, rho=rho, weights=weights, reliability=rels, y_prime=y_prime)
    return terms


def baseline_batch(model: CpscModel, xs, labels) -> dict:
    """Fused CE plus unweighted unimodal CEs on the plain mean of all components."""
    labels = np.asarray(labels)
    B = labels.shape[0]
    n = model.config.component_count
    cache = model.forward_encode(xs, decompose=True)
    model.forward_heads(cache, [rsc.uniform_coef(B, n)] * model.config.modality_count)
    ce_mul, err_mul, probs = _ce_terms(cache.fused_logits, labels)
    uni, seeds = [], []
    for m in range(model.config.modality_count):
        ce, err, _ = _ce_terms(cache.uni_logits[m], labels)
        uni.append(float(ce.mean()))
        seeds.append(err / B)
    model.backward(cache, fused_dlogits=err_mul / B, uni_dlogits=seeds)
    total = float(ce_mul.mean()) + sum(uni)
    return {"mul": float(ce_mul.mean()), "uni": uni, "div": [0.0] * len(uni), "total": total,
            "fused_probs": probs, "cache": cache}


def warmup_batch(model: CpscModel, xs, labels) -> dict:
    labels = np.asarray(labels)
    cache = model.forward(xs, coef=None, unimodal=False)
    ce, err, probs = _ce_terms(cache.fused_logits, labels)
    model.backward(cache, fused_dlogits=err / labels.shape[0])
    M = model.config.modality_count
    return {"mul": float(ce.mean()), "uni": [math.nan] * M, "div": [0.0] * M, "total": float(ce.mean()),
            "fused_probs": probs, "cache": cache}


# conformal refresh and inference


def fused_probs(model: CpscModel, xs) -> np.ndarray:
    return softmax(model.forward(xs, coef=None, unimodal=False).fused_logits)


def rsc_fused_probs(model: CpscModel, conformal: ConformalState, xs, targets) -> np.ndarray:
    """Fused probabilities through decompose -> top-K by reliability for ``targets`` -> average."""
    cache = model.forward_encode(xs, decompose=True)
    coefs, _ = select_components(model, conformal, cache, targets)
    model.forward_heads(cache, coefs, unimodal=False)
    return softmax(cache.fused_logits)


def cp_refresh(model: CpscModel, cal: Dataset, alpha: float, previous: ConformalState | None = None,
               path: str = "fused") -> ConformalState:
    if len(cal) == 0:
        raise CalibrationError("empty calibration set")
    if path == "rsc" and previous is not None:
        probs = rsc_fused_probs(model, previous, cal.features, cal.labels)
    else:
        probs = fused_probs(model, cal.features)
    scores = 1.0 - probs[np.arange(len(cal)), cal.labels]
    version = 0 if previous is None else previous.version + 1
    return ConformalState.from_scores(scores, alpha, version=version)


def infer(model: CpscModel, xs, mode: str = "default", conformal: ConformalState | None = None):
    """Fused probabilities and predicted classes.

    ``default`` feeds raw encoder features to the fusion head. ``rsc`` decomposes,
    ranks components against the default-path prediction and fuses the top-K
    average; it needs a conformal state.
    """
    single = np.ndim(xs[0]) == 1
    xs = [np.atleast_2d(x) for x in xs]
    probs = fused_probs(model, xs)
    if mode == "rsc":
        if conformal is None:
            raise ConfigError("rsc inference needs a conformal state")
        probs = rsc_fused_probs(model, conformal, xs, np.argmax(probs, axis=1))
    elif mode != "default":
        raise ConfigError(f"unknown inference mode {mode!r}")
    pred = np.argmax(probs, axis=1)
    if single:
        return probs[0], int(pred[0])
    return probs, pred


def heldout_reliability(model: CpscModel, conformal: ConformalState, ds: Dataset) -> np.ndarray:
    """Mean modality reliability on raw features against the fused prediction, per modality."""
    cache = model.forward(ds.features, coef=None, unimodal=True)
    rho, _ = gsc.modality_reliability(model, conformal, cache.feats, softmax(cache.fused_logits))
    return rho.mean(axis=0)


def evaluate(model: CpscModel, ds: Dataset, conformal: ConformalState | None = None, mode: str = "default") -> dict:
    cache = model.forward(ds.features, coef=None, unimodal=True)
    probs = softmax(cache.fused_logits)
    if mode != "default":
        probs, _ = infer(model, ds.features, mode, conformal)
    out = {
        "acc_fused": float(np.mean(np.argmax(probs, axis=1) == ds.labels)),
        "acc_uni": [float(np.mean(np.argmax(lg, axis=1) == ds.labels)) for lg in cache.uni_logits],
    }
    if conformal is not None:
        out["coverage"], out["mean_set_size"] = coverage_audit(probs, ds.labels, conformal.q_hat)
        rho, _ = gsc.modality_reliability(model, conformal, cache.feats, softmax(cache.fused_logits))
        out["rho"] = rho.mean(axis=0).tolist()
    return out


# epoch driver


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, 5, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _clip(model: CpscModel, max_norm: float | None):
    if not max_norm:
        return
    norm = math.sqrt(sum(float(np.sum(p.grad**2)) for p in model.params.values()))
    if norm > max_norm:
        for p in model.params.values():
            p.grad *= max_norm / norm


def run_epoch(model: CpscModel, train: Dataset, cfg: TrainConfig, epoch: int, phase: str,
              conformal: ConformalState | None = None, collect: dict | None = None) -> EpochReport:
    M = model.config.modality_count
    sums = {"total": 0.0, "mul": 0.0, "uni": np.zeros(M), "div": np.zeros(M)}
    correct, correct_uni, seen = 0, np.zeros(M), 0
    rho_sum, w_sum = np.zeros(M), np.zeros(M)
    n_batches = 0
    model.zero_grad()
    for idx in _batches(len(train), cfg.batch_size, cfg.seed, epoch):
        xs = [f[idx] for f in train.features]
        y = train.labels[idx]
        if phase == "warmup":
            terms = warmup_batch(model, xs, y)
        elif phase == "baseline":
            terms = baseline_batch(model, xs, y)
        else:
            terms = cpsc_batch(model, conformal, xs, y, cfg)
        if not math.isfinite(terms["total"]):
            raise NumericError(
                f"non-finite loss at epoch {epoch}, batch {n_batches}",
                {"epoch": epoch, "batch": n_batches, "phase": phase, "mul": terms["mul"],
                 "uni": list(terms["uni"]), "div": list(terms["div"]), "indices": idx.tolist()},
            )
        b = len(idx)
        sums["total"] += terms["total"] * b
        sums["mul"] += terms["mul"] * b
        sums["uni"] += np.asarray(terms["uni"]) * b
        sums["div"] += np.asarray(terms["div"]) * b
        correct += int(np.sum(np.argmax(terms["fused_probs"], axis=1) == y))
        cache = terms["cache"]
        if cache.uni_logits is not None:
            correct_uni += [np.sum(np.argmax(lg, axis=1) == y) for lg in cache.uni_logits]
        seen += b
        if phase == "cpsc":
            rho_sum += terms["rho"].sum(axis=0)
            w_sum += terms["weights"].sum(axis=0)
            if collect is not None:
                for m in range(M):
                    collect.setdefault(("rel", m), []).append(terms["reliability"][m].reshape(-1))
                    collect.setdefault(("grad", m), []).append(gsc.per_sample_head_grads(cache, y, m))
                    collect.setdefault(("w", m), []).append(terms["weights"][:, m])
        n_batches += 1
        if cfg.update == "batch":
            _clip(model, cfg.grad_clip)
            model.step(cfg.optimizer)
            model.zero_grad()
    if cfg.update == "epoch":
        for p in model.params.values():
            p.grad /= n_batches
        _clip(model, cfg.grad_clip)
        model.step(cfg.optimizer)
        model.zero_grad()
    uni_acc = (correct_uni / seen).tolist() if phase != "warmup" else [math.nan] * M
    return EpochReport(
        epoch=epoch,
        phase=phase,
        loss_total=sums["total"] / seen,
        loss_mul=sums["mul"] / seen,
        loss_uni=(sums["uni"] / seen).tolist(),
        loss_div=(sums["div"] / seen).tolist(),
        acc_fused=correct / seen,
        acc_uni=uni_acc,
        mean_rho=(rho_sum / seen).tolist() if phase == "cpsc" else [math.nan] * M,
        mean_w=(w_sum / seen).tolist() if phase == "cpsc" else [math.nan] * M,
    )


def warmup(model: CpscModel, train: Dataset, cal: Dataset, cfg: TrainConfig) -> tuple[list[EpochReport], ConformalState]:
    reports = [run_epoch(model, train, cfg, e, "warmup") for e in range(cfg.warmup_epochs)]
    return reports, cp_refresh(model, cal, cfg.alpha)


def train_epoch(model: CpscModel, conformal: ConformalState, train: Dataset, cfg: TrainConfig, epoch: int,
                collect: dict | None = None) -> EpochReport:
    phase = "baseline" if cfg.method == "baseline" else "cpsc"
    return run_epoch(model, train, cfg, epoch, phase, conformal, collect)


def fit(model: CpscModel, train: Dataset, cal: Dataset, cfg: TrainConfig, test: Dataset | None = None,
        on_checkpoint=None) -> TrainResult:
    """Warm-up, then self-calibrating (or baseline) epochs with periodic conformal refresh."""
    if train.modality_count != model.config.modality_count:
        raise DimensionError("dataset and model disagree on modality count")
    reports, conformal = warmup(model, train, cal, cfg)
    warm_state = conformal
    if on_checkpoint is not None:
        on_checkpoint("warmup", model, conformal)
    result = TrainResult(reports, conformal, warm_state)
    if test is not None:
        cov, size = coverage_audit(fused_probs(model, test.features), test.labels, conformal.q_hat)
        result.coverage_rows.append({"epoch": cfg.warmup_epochs - 1, "alpha": cfg.alpha, "q_hat": conformal.q_hat,
                                     "coverage": cov, "mean_set_size": size})
    for epoch in range(cfg.warmup_epochs, cfg.epochs):
        collect = {} if cfg.method == "cpsc" else None
        used = conformal
        report = train_epoch(model, conformal, train, cfg, epoch, collect)
        if (epoch - cfg.warmup_epochs + 1) % cfg.cp_update_interval == 0:
            conformal = cp_refresh(model, cal, cfg.alpha, conformal, cfg.refresh_path)
        report.cp_version = used.version
        report.q_hat = used.q_hat
        if test is not None:
            ev = evaluate(model, test, conformal)
            report.coverage, report.mean_set_size = ev["coverage"], ev["mean_set_size"]
            report.test_acc_fused, report.test_acc_uni = ev["acc_fused"], ev["acc_uni"]
            result.coverage_rows.append({"epoch": epoch, "alpha": cfg.alpha, "q_hat": conformal.q_hat,
                                         "coverage": ev["coverage"], "mean_set_size": ev["mean_set_size"]})
        if collect:
            for m in range(model.config.modality_count):
                g = np.concatenate(collect[("grad", m)])
                w = np.concatenate(collect[("w", m)])
                wv, uv = gsc.variance_diagnostic(g, w)
                result.gsc_rows.append({"epoch": epoch, "modality": m, "mean_rho": report.mean_rho[m],
                                        "mean_w": report.mean_w[m], "weighted_var": wv, "unweighted_var": uv})
                for lo, hi, count in rsc.reliability_histogram(np.concatenate(collect[("rel", m)])):
                    result.histogram_rows.append({"epoch": epoch, "modality": m, "bin_lo": lo, "bin_hi": hi,
                                                  "count": count})
        result.reports.append(report)
        log.debug("epoch %d loss %.5f acc %.4f q_hat %.4f", epoch, report.loss_total, report.acc_fused, used.q_hat)
    result.conformal = conformal
    if on_checkpoint is not None:
        on_checkpoint("final", model, conformal)
    return result
