"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

End-to-end criteria share cached training runs (5 seeds, default configuration).
"""

import dataclasses
import functools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from cpsc import cli, config, experiments, gsc, rsc
from cpsc.conformal import calibrate, rank_reliability, rank_reliability_batch
from cpsc.model import CpscModel, ModelConfig
from cpsc.trainer import fit, warmup

SEEDS = [0, 1, 2, 3, 4]
NOISE = [("gaussian", 5.0), ("gaussian", 10.0)]


def verdict(log, n, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n:2d} {title}: {detail}"
    log[n] = line
    print(line)
    return passed


# cached end-to-end runs


@functools.cache
def outcomes(variant: str):
    cfg = config.RunConfig()
    if variant == "baseline":
        cfg = config.baseline(cfg)
    elif variant.startswith("interval"):
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, cp_update_interval=int(variant[8:])))
    elif variant == "no_warmup":
        cfg = config.apply_ablation(cfg, "warmup")
    return [experiments.run(cfg, s, noise=NOISE if variant in ("cpsc", "baseline") else ()) for s in SEEDS]


@functools.cache
def timed(variant: str):
    t = time.perf_counter()
    out = outcomes(variant)
    return out, time.perf_counter() - t


# 1-7: guarantees and oracle equivalences


def test_c01_conformal_coverage(acceptance_log):
    t = time.perf_counter()
    cfg = config.RunConfig().for_seed(0)
    train, cal, _ = experiments.make_data(cfg)
    model = CpscModel(cfg.model, 0)
    warmup(model, train, cal, cfg.train)
    rows = cli.audit_rows(model, cfg, 0, [0.1], resamples=20, cal_size=500, test_size=2000)
    threshold = 0.9 - 3 * math.sqrt(0.09 / 2000)
    hits = sum(r["coverage"] >= threshold for r in rows)
    elapsed = time.perf_counter() - t
    covs = [r["coverage"] for r in rows]
    ok = verdict(acceptance_log, 1, "conformal coverage", hits >= 18 and elapsed < 30,
                 f"{hits}/20 audits >= {threshold:.4f} (mean {np.mean(covs):.4f}, min {min(covs):.4f}), {elapsed:.1f}s")
    assert ok


def oracle_quantile(scores, alpha):
    n = len(scores)
    prod = (n + 1) * (1 - Fraction(repr(alpha)))
    k = -((-prod.numerator) // prod.denominator)
    return 1.0 if k > n else sorted(scores)[max(k, 1) - 1]


def test_c02_quantile_oracle(acceptance_log):
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    grid = [0.01, 0.05, 0.1, 0.2, 0.25, 0.3, 0.5, 0.7, 0.9]
    mismatches = 0
    for i in range(1000):
        n = int(rng.integers(1, 300))
        scores = rng.random(n)
        if i % 4 == 0:
            scores = np.round(scores, 1)  # many ties
        alpha = float(grid[i % len(grid)]) if i % 2 else float(rng.uniform(0.001, 0.999))
        mismatches += calibrate(scores, alpha) != oracle_quantile(scores.tolist(), alpha)
    elapsed = time.perf_counter() - t
    ok = verdict(acceptance_log, 2, "quantile correctness", mismatches == 0 and elapsed < 5,
                 f"{mismatches} mismatches in 1000 cases, {elapsed:.2f}s")
    assert ok


def test_c03_gradient_fidelity(acceptance_log):
    t = time.perf_counter()
    mc = ModelConfig(input_dims=(5, 6), feature_dim=4, component_count=3, top_k=2, class_count=3, hidden=6)
    worst = 0.0
    for seed in range(10):
        worst = max(worst, max(cli.gradcheck(seed=100 + seed, model_cfg=mc, batch=4).values()))
    elapsed = time.perf_counter() - t
    ok = verdict(acceptance_log, 3, "gradient fidelity", worst < 1e-4 and elapsed < 60,
                 f"max block relative error {worst:.2e} over 10 inits, {elapsed:.1f}s")
    assert ok


def test_c04_proposition1_bound(acceptance_log):
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    violations = 0
    for _ in range(10_000):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(1, 9))
        comps = rng.normal(size=(n, d)) * rng.uniform(0.1, 10)
        sel = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
        h_star = rng.normal(size=d) * rng.uniform(0.1, 10)
        chosen = comps[sel]
        lhs = np.linalg.norm(chosen.mean(axis=0) - h_star)
        rhs = np.mean(np.linalg.norm(chosen - h_star, axis=1))
        violations += lhs > rhs + 1e-12
        try:
            rsc.proposition1_check(comps, sel, h_star)
        except Exception:
            violations += 1
    elapsed = time.perf_counter() - t
    ok = verdict(acceptance_log, 4, "instance-wise convexity bound", violations == 0 and elapsed < 5,
                 f"{violations} violations in 10^4 triples, {elapsed:.2f}s")
    assert ok


def oracle_reliability(probs, q_hat, target):
    members = sorted((1.0 - p, c) for c, p in enumerate(probs) if 1.0 - p <= q_hat)
    labels = [c for _, c in members]
    if target not in labels:
        return 0.0
    return 1.0 - (labels.index(target) + 1) / len(labels)


def test_c05_reliability_oracle(acceptance_log):
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    mismatches = 0
    for i in range(10_000):
        k = int(rng.integers(2, 10))
        probs = rng.dirichlet(np.full(k, rng.uniform(0.2, 3)))
        if i % 3 == 0:
            probs = np.round(probs, 1)  # ties
        q = float(rng.choice([rng.random(), 1.0, 0.0, float(1 - probs[rng.integers(k)])]))
        target = int(rng.integers(k))
        want = oracle_reliability(probs.tolist(), q, target)
        mismatches += rank_reliability(probs, q, target) != want
        mismatches += float(rank_reliability_batch(probs, q, target)) != want
    elapsed = time.perf_counter() - t
    ok = verdict(acceptance_log, 5, "rank reliability oracle", mismatches == 0 and elapsed < 5,
                 f"{mismatches} mismatches in 10^4 cases (sorted and counting paths), {elapsed:.2f}s")
    assert ok


def test_c06_gsc_linearity(acceptance_log):
    rng = np.random.default_rng(6)
    mc = ModelConfig(input_dims=(5, 6), feature_dim=4, component_count=3, top_k=2, class_count=3, hidden=6)
    model = CpscModel(mc, 6)
    worst = 0.0
    for _ in range(100):
        xs = [rng.normal(size=(4, 5)), rng.normal(size=(4, 6))]
        y = rng.integers(3, size=4)
        w = rng.uniform(0, 2, size=(4, 2))
        cache = model.forward(xs, coef=[rsc.selection_coef(rsc.select_topk(rng.random((4, 3)), 2), 3)] * 2)
        model.zero_grad()
        gsc.weighted_unimodal_backward(model, cache, y, w)
        batch = {k: p.grad.copy() for k, p in model.params.items()}
        brute = {k: np.zeros_like(v) for k, v in batch.items()}
        for i in range(4):
            for m in range(2):
                unit = np.zeros((4, 2))
                unit[i, m] = 1.0
                model.zero_grad()
                gsc.weighted_unimodal_backward(model, cache, y, unit)
                for k, p in model.params.items():
                    brute[k] += w[i, m] * p.grad
        worst = max(worst, max(float(np.max(np.abs(batch[k] - brute[k]))) for k in batch))
    ok = verdict(acceptance_log, 6, "GSC linearity", worst <= 1e-10,
                 f"max abs deviation {worst:.2e} over 100 batches of 4")
    assert ok


def test_c07_degeneration_to_baseline(acceptance_log):
    base = config.RunConfig()
    base = dataclasses.replace(base, train=dataclasses.replace(base.train, epochs=base.train.warmup_epochs + 5))
    degenerate = config.apply_ablation(config.apply_ablation(base, "rsc"), "gsc")
    assert degenerate.model.top_k == degenerate.model.component_count
    assert (degenerate.train.lambda1, degenerate.train.lambda2, degenerate.train.a, degenerate.train.b) == (0, 0, 0, 1)
    curves = []
    for cfg in (degenerate, config.baseline(base)):
        cfg = cfg.for_seed(0)
        train, cal, _ = experiments.make_data(cfg)
        res = fit(CpscModel(cfg.model, 0), train, cal, cfg.train)
        curves.append([r for r in res.reports if r.phase != "warmup"])
    assert [r.phase for r in curves[0]] == ["cpsc"] * 5 and [r.phase for r in curves[1]] == ["baseline"] * 5
    worst = 0.0
    for a, b in zip(*curves):
        vals_a = [a.loss_total, a.loss_mul, *a.loss_uni, *a.loss_div]
        vals_b = [b.loss_total, b.loss_mul, *b.loss_uni, *b.loss_div]
        worst = max(worst, max(abs(x - y) for x, y in zip(vals_a, vals_b)))
    ok = verdict(acceptance_log, 7, "degeneration to baseline", worst <= 1e-9,
                 f"max per-epoch loss difference {worst:.2e} over 5 epochs")
    assert ok


# 8-12: end-to-end directional claims


def _mean(outs, key, idx=None):
    vals = [o.final[key] if idx is None else o.final[key][idx] for o in outs]
    return float(np.mean(vals)), np.asarray(vals)


def _effect(diffs):
    sd = float(np.std(diffs, ddof=1))
    return float(np.mean(diffs)) / sd if sd > 0 else math.inf


@pytest.mark.slow
def test_c08_imbalance_benefit(acceptance_log):
    (cp, t1), (bl, t2) = timed("cpsc"), timed("baseline")
    fused_c, fc = _mean(cp, "acc_fused")
    fused_b, fb = _mean(bl, "acc_fused")
    weak_c, wc = _mean(cp, "acc_uni", 1)
    weak_b, wb = _mean(bl, "acc_uni", 1)
    passed = fused_c - fused_b > 0 and weak_c - weak_b > 0 and t1 + t2 < 300
    ok = verdict(acceptance_log, 8, "imbalance benefit", passed,
                 f"fused {fused_c:.4f} vs {fused_b:.4f} (margin {fused_c - fused_b:+.4f}, paired d {_effect(fc - fb):+.2f}); "
                 f"weak modality {weak_c:.4f} vs {weak_b:.4f} (margin {weak_c - weak_b:+.4f}, "
                 f"paired d {_effect(wc - wb):+.2f}); {t1 + t2:.0f}s")
    assert ok


@pytest.mark.slow
def test_c09_noise_robustness(acceptance_log):
    cp, bl = outcomes("cpsc"), outcomes("baseline")
    parts, passed = [], True
    for kind, eps in NOISE:
        key = f"{kind}@{eps:g}"
        drop_c = float(np.mean([o.final["acc_fused"] - o.corrupted[key] for o in cp]))
        drop_b = float(np.mean([o.final["acc_fused"] - o.corrupted[key] for o in bl]))
        acc_c = float(np.mean([o.corrupted[key] for o in cp]))
        acc_b = float(np.mean([o.corrupted[key] for o in bl]))
        passed &= drop_c <= drop_b
        parts.append(f"eps={eps:g}: drop {drop_c:.4f} vs {drop_b:.4f} (corrupted acc {acc_c:.4f} vs {acc_b:.4f})")
    ok = verdict(acceptance_log, 9, "noise robustness", passed, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_c10_cp_update_frequency(acceptance_log):
    accs = [float(np.mean([o.final["acc_fused"] for o in outcomes(v)])) for v in ("cpsc", "interval5", "interval10")]
    inversions = sum(b > a for a, b in zip(accs, accs[1:]))
    no_warm = float(np.mean([o.final["acc_fused"] for o in outcomes("no_warmup")]))
    passed = inversions <= 1 and no_warm < accs[0]
    ok = verdict(acceptance_log, 10, "CP update frequency", passed,
                 f"interval 1/5/10 acc {accs[0]:.4f}/{accs[1]:.4f}/{accs[2]:.4f} ({inversions} inversions); "
                 f"t0=0 {no_warm:.4f} vs t0=5 {accs[0]:.4f}")
    assert ok


@pytest.mark.slow
def test_c11_reliability_shift(acceptance_log):
    cp = outcomes("cpsc")
    before = np.array([o.rho_warmup for o in cp])
    after = np.array([o.rho_final for o in cp])
    passed = after.mean() > before.mean()
    ok = verdict(acceptance_log, 11, "reliability shift", passed,
                 f"mean rho {before.mean():.4f} -> {after.mean():.4f} "
                 f"(per modality {np.round(before.mean(0), 4).tolist()} -> {np.round(after.mean(0), 4).tolist()})")
    assert ok


@pytest.mark.slow
def test_c12_determinism(acceptance_log, tmp_path, monkeypatch):
    monkeypatch.delenv("CPSC_SEED", raising=False)
    dirs = []
    for name in ("first", "second"):
        assert cli.main(["train", "--out", str(tmp_path / name), "--seeds", "3"]) == 0
        dirs.append(tmp_path / name / "seed_3")
    names = ["metrics.csv", "coverage.csv", "gsc.csv", "histogram.csv"]
    same = [(dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes() for n in names]
    ok = verdict(acceptance_log, 12, "determinism", all(same),
                 f"{sum(same)}/{len(names)} metric CSVs byte-identical across two full runs")
    assert ok
