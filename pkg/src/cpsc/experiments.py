"""Seeded end-to-end runs and multi-seed sweeps shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .conformal import COVERAGE_COLUMNS
from .data import CorruptionSpec, Dataset, apply_corruption, generate, generate_test
from .errors import ConfigError
from .gsc import GSC_COLUMNS
from .model import CpscModel
from .rsc import HISTOGRAM_COLUMNS
from .trainer import TrainResult, evaluate, fit, heldout_reliability, split_data

log = logging.getLogger(__name__)

SWEEP_AXES = ("optimizer", "cp_interval", "alpha", "noise")
SUMMARY_COLUMNS = ["axis", "value", "method", "metric", "mean", "std", "n"]


@dataclass
class RunOutcome:
    seed: int
    config: dict
    final: dict
    rho_warmup: list[float]
    rho_final: list[float]
    corrupted: dict = field(default_factory=dict)
    result: TrainResult | None = None

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "final": self.final,
            "rho_warmup": self.rho_warmup,
            "rho_final": self.rho_final,
            "corrupted": self.corrupted,
            "config": self.config,
        }


def make_data(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """(train, cal, test) for an already seeded config."""
    pool = generate(cfg.data)
    train, cal = split_data(pool, cfg.train.calibration_fraction, cfg.train.seed)
    return train, cal, generate_test(cfg.data)


def corrupted_copy(test: Dataset, kind: str, eps: float, modalities, seed: int) -> Dataset:
    return apply_corruption(test, CorruptionSpec(kind, eps, tuple(modalities), "test"), seed=seed)


def run(cfg: RunConfig, seed: int, outdir=None, noise: list[tuple[str, float]] = (),
        keep_result: bool = False) -> RunOutcome:
    """Warm-up plus training for one seed, final evaluation on clean and corrupted test data."""
    cfg = cfg.for_seed(seed)
    train, cal, test = make_data(cfg)
    model = CpscModel(cfg.model, seed)
    warm = {}
    ckpt_dir = None if outdir is None else Path(outdir)

    def on_checkpoint(stage, mdl, state):
        if stage == "warmup":
            warm["rho"] = heldout_reliability(mdl, state, test).tolist()
        if ckpt_dir is not None:
            mdl.save(ckpt_dir / f"checkpoint_{stage}.npz",
                     extra={"stage": stage, "q_hat": state.q_hat, "alpha": state.alpha, "cp_version": state.version})

    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    result = fit(model, train, cal, cfg.train, test=test, on_checkpoint=on_checkpoint)
    final = evaluate(model, test, result.conformal)
    corrupted = {}
    targets = cfg.data.corruption.modalities
    for kind, eps in noise:
        noisy = corrupted_copy(test, kind, eps, targets, cfg.data.seed)
        corrupted[f"{kind}@{eps:g}"] = evaluate(model, noisy)["acc_fused"]
    out = RunOutcome(seed, cfg.to_dict(), final, warm["rho"], final["rho"], corrupted,
                     result if keep_result else None)
    if ckpt_dir is not None:
        write_run(ckpt_dir, result, out)
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in columns})


def write_run(outdir: Path, result: TrainResult, outcome: RunOutcome) -> None:
    rows = [r.row() for r in result.reports]
    columns = list(dict.fromkeys(k for r in rows for k in r))
    write_csv(outdir / "metrics.csv", rows, columns)
    write_csv(outdir / "coverage.csv", result.coverage_rows, COVERAGE_COLUMNS)
    write_csv(outdir / "gsc.csv", result.gsc_rows, GSC_COLUMNS)
    write_csv(outdir / "histogram.csv", result.histogram_rows, HISTOGRAM_COLUMNS)
    (outdir / "summary.json").write_text(json.dumps(outcome.summary(), indent=2, sort_keys=True) + "\n")


def atomic_outdir(path) -> tuple[Path, Path]:
    """A fresh sibling temp dir to fill, and the final path it gets renamed to."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    return tmp, path


def commit_outdir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


# sweeps


def _parse_values(axis: str, values: list[str]):
    if axis == "optimizer":
        return [v.lower() for v in values]
    if axis == "cp_interval":
        return [int(v) for v in values]
    if axis == "alpha":
        return [float(v) for v in values]
    if axis == "noise":
        out = []
        for v in values:
            kind, _, eps = v.partition("@")
            if not eps:
                raise ConfigError(f"noise values look like kind@eps, got {v!r}")
            out.append((kind, float(eps)))
        return out
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")


def _with_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    train = cfg.train
    if axis == "optimizer":
        train = dataclasses.replace(train, optimizer=dataclasses.replace(train.optimizer, name=value, eps=None))
    elif axis == "cp_interval":
        train = dataclasses.replace(train, cp_update_interval=value)
    elif axis == "alpha":
        train = dataclasses.replace(train, alpha=value)
    return RunConfig(cfg.data, cfg.model, train, cfg.data_seed_offset)


def sweep(cfg: RunConfig, axis: str, values: list[str], seeds: list[int], with_baseline: bool = True,
          outdir=None) -> list[dict]:
    """Cartesian product of axis values, methods and seeds; returns mean/std rows per cell."""
    parsed = _parse_values(axis, values)
    methods = [("cpsc", cfg)] + ([("baseline", config_mod.baseline(cfg))] if with_baseline else [])
    rows = []
    if axis == "noise":
        for method, mcfg in methods:
            outs = [run(mcfg, s, noise=parsed) for s in seeds]
            for kind, eps in parsed:
                key = f"{kind}@{eps:g}"
                accs = [o.corrupted[key] for o in outs]
                clean = [o.final["acc_fused"] for o in outs]
                for metric, vals in (("acc_fused", accs), ("drop", np.subtract(clean, accs))):
                    mu, sd = mean_std(vals)
                    rows.append({"axis": axis, "value": key, "method": method, "metric": metric,
                                 "mean": mu, "std": sd, "n": len(vals)})
    else:
        for value in parsed:
            for method, mcfg in methods:
                outs = [run(_with_axis(mcfg, axis, value), s) for s in seeds]
                metrics = {"acc_fused": [o.final["acc_fused"] for o in outs]}
                for m in range(len(outs[0].final["acc_uni"])):
                    metrics[f"acc_uni_{m}"] = [o.final["acc_uni"][m] for o in outs]
                metrics["coverage"] = [o.final["coverage"] for o in outs]
                metrics["mean_set_size"] = [o.final["mean_set_size"] for o in outs]
                for metric, vals in metrics.items():
                    mu, sd = mean_std(vals)
                    rows.append({"axis": axis, "value": value, "method": method, "metric": metric,
                                 "mean": mu, "std": sd, "n": len(vals)})
    if outdir is not None:
        write_csv(Path(outdir) / f"sweep_{axis}.csv", rows, SUMMARY_COLUMNS)
    return rows
