"""Command-line driver.

    cpsc train    --config run.yaml --out runs/x --seeds 0,1,2 [--ablate rsc]
    cpsc audit    --config run.yaml --out runs/x [--checkpoint ckpt.npz] [--resamples 20]
    cpsc gradcheck [--config run.yaml] [--seed 0]
    cpsc sweep    --config run.yaml --out runs/x --axis cp_interval --values 1,5,10

Exit codes: 0 ok, 1 gradient check failed, 2 usage or config error,
3 numeric error, 4 calibration error. ``CPSC_SEED`` overrides ``--seeds``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import experiments
from .conformal import COVERAGE_COLUMNS, ConformalState, coverage_audit
from .data import generate
from .errors import ConfigError, CpscError, NumericError
from .model import CpscModel, ModelConfig
from .numeric import finite_diff_grad, relative_error
from .trainer import cpsc_loss, fused_probs, warmup

log = logging.getLogger("cpsc")

EXIT_GRADCHECK = 1
GRAD_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from exc


def resolve_seeds(arg: str | None) -> list[int]:
    env = os.environ.get("CPSC_SEED")
    if env:
        return _int_list(env)
    return _int_list(arg) if arg else [0, 1, 2, 3, 4]


def _load(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    for what in getattr(args, "ablate", None) or []:
        cfg = config_mod.apply_ablation(cfg, what)
    if getattr(args, "baseline", False):
        cfg = config_mod.baseline(cfg)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    seeds = resolve_seeds(args.seeds)
    tmp, final = experiments.atomic_outdir(args.out)
    try:
        (tmp / "config.yaml").write_text(config_mod.dump(cfg))
        summaries = []
        for seed in seeds:
            out = experiments.run(cfg, seed, outdir=tmp / f"seed_{seed}")
            summaries.append(out.summary())
            log.info("seed %d: test acc %.4f, unimodal %s", seed, out.final["acc_fused"],
                     [round(a, 4) for a in out.final["acc_uni"]])
        (tmp / "summary.json").write_text(json.dumps({"seeds": seeds, "runs": summaries}, indent=2, sort_keys=True) + "\n")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    experiments.commit_outdir(tmp, final)
    print(final)
    return 0


def _audit_model(cfg, seed, checkpoint):
    """A frozen model: from a checkpoint, or after a fresh warm-up."""
    if checkpoint:
        path = Path(checkpoint)
        if not path.is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        model = CpscModel.load(path)
        if model.config.input_dims != cfg.model.input_dims:
            raise ConfigError("checkpoint and config disagree on input dims")
        return model
    train, cal, _ = experiments.make_data(cfg)
    model = CpscModel(cfg.model, seed)
    warmup(model, train, cal, cfg.train)
    return model


def audit_rows(model, cfg, seed, alphas, resamples=20, cal_size=500, test_size=2000) -> list[dict]:
    """Coverage of a frozen model over independent fresh (cal, test) draws."""
    rows = []
    start = cfg.data.samples + cfg.data.test_samples
    for r in range(resamples):
        fresh = generate(cfg.data, offset=start + r * (cal_size + test_size), count=cal_size + test_size)
        probs = fused_probs(model, fresh.features)
        scores = 1.0 - probs[np.arange(len(fresh)), fresh.labels]
        for alpha in alphas:
            state = ConformalState.from_scores(scores[:cal_size], alpha)
            cov, size = coverage_audit(probs[cal_size:], fresh.labels[cal_size:], state.q_hat)
            rows.append({"seed": seed, "resample": r, "alpha": alpha, "q_hat": state.q_hat,
                         "coverage": cov, "mean_set_size": size})
    return rows


def cmd_audit(args) -> int:
    cfg = _load(args)
    seeds = resolve_seeds(args.seeds)
    alphas = [float(a) for a in args.alpha.split(",")] if args.alpha else [cfg.train.alpha]
    rows = []
    for seed in seeds:
        scfg = cfg.for_seed(seed)
        model = _audit_model(scfg, seed, args.checkpoint)
        rows += audit_rows(model, scfg, seed, alphas, args.resamples, args.cal_size, args.test_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    experiments.write_csv(out / "audit.csv", rows, ["seed", "resample"] + COVERAGE_COLUMNS[1:])
    for alpha in alphas:
        sel = [r for r in rows if r["alpha"] == alpha]
        cov = np.array([r["coverage"] for r in sel])
        print(f"alpha={alpha:g}: mean coverage {cov.mean():.4f}, min {cov.min():.4f}, "
              f"mean set size {np.mean([r['mean_set_size'] for r in sel]):.3f} over {len(sel)} audits")
    return 0


def gradcheck(seed: int = 0, model_cfg: ModelConfig | None = None, batch: int = 4, lam1=0.8, lam2=0.2,
              corrupt=None) -> dict[str, float]:
    """Max relative error per parameter block of the full objective (selection and weights frozen).

    ``corrupt(model)`` may tamper with the analytic gradients before comparison (negative control).
    """
    from . import rsc

    mc = model_cfg or ModelConfig(input_dims=(5, 6), feature_dim=4, component_count=3, top_k=2, class_count=3, hidden=6)
    if mc.feature_dim > 8 or mc.component_count > 4:
        raise ConfigError("gradcheck needs feature_dim <= 8 and component_count <= 4")
    model = CpscModel(mc, seed)
    rng = np.random.default_rng([seed, 7])
    for prm in model.params.values():
        prm.value += 0.1 * rng.normal(size=prm.value.shape)
    xs = [rng.normal(size=(batch, d)) for d in mc.input_dims]
    labels = rng.integers(mc.class_count, size=batch)
    coef = []
    for _ in range(mc.modality_count):
        sel = np.array([rng.permutation(mc.component_count)[: mc.top_k] for _ in range(batch)])
        coef.append(rsc.selection_coef(sel, mc.component_count))
    weights = rng.uniform(0.5, 1.5, size=(batch, mc.modality_count))

    model.zero_grad()
    cpsc_loss(model, xs, labels, coef, weights, lam1, lam2, backward=True)
    if corrupt is not None:
        corrupt(model)
    analytic = {k: p.grad.copy() for k, p in model.params.items()}
    numeric = finite_diff_grad(lambda _: cpsc_loss(model, xs, labels, coef, weights, lam1, lam2)["total"],
                               model.params)
    return {k: relative_error(analytic[k], numeric[k]) for k in model.params}


def cmd_gradcheck(args) -> int:
    mc = None
    if args.config:
        cfg = config_mod.load(args.config)
        mc = cfg.model
    errors = gradcheck(args.seed, mc)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:12s} {err:.3e} {'ok' if err < GRAD_TOL else 'FAIL'}")
    print(f"max relative error {worst:.3e} (tolerance {GRAD_TOL:g})")
    return 0 if worst < GRAD_TOL else EXIT_GRADCHECK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.axis not in experiments.SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; choose from {', '.join(experiments.SWEEP_AXES)}")
    if not args.values:
        raise ConfigError("--values is required for sweep")
    seeds = resolve_seeds(args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = experiments.sweep(cfg, args.axis, args.values.split(","), seeds, outdir=out)
    for r in rows:
        print(f"{r['value']!s:>14} {r['method']:>8} {r['metric']:>14} {r['mean']:.4f} ± {r['std']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpsc", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML run config (defaults built in)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
        sp.add_argument("--ablate", action="append", choices=config_mod.ABLATIONS,
                        help="switch off part of the method (repeatable)")
        sp.add_argument("--baseline", action="store_true", help="train the plain baseline instead")

    sp = sub.add_parser("train", help="warm-up plus self-calibrating training per seed")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("audit", aliases=["coverage-audit"], help="conformal coverage on held-out data")
    common(sp)
    sp.add_argument("--checkpoint", help="model checkpoint; default is a fresh warm-up")
    sp.add_argument("--alpha", help="comma-separated miscoverage levels (default: config alpha)")
    sp.add_argument("--resamples", type=int, default=20)
    sp.add_argument("--cal-size", type=int, default=500)
    sp.add_argument("--test-size", type=int, default=2000)
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sweep", help="multi-seed grid over one axis, CPSC and baseline")
    common(sp)
    sp.add_argument("--axis", required=True)
    sp.add_argument("--values")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return exc.exit_code
    except CpscError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
