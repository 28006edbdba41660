"""CPSC vs the plain baseline on the imbalanced benchmark, clean and with test-time noise.

    python3 scripts/compare_baseline.py --seeds 0,1,2,3,4 --out runs/compare
"""

import argparse
from pathlib import Path

import numpy as np

from cpsc import config, experiments

NOISE = [("gaussian", 5.0), ("gaussian", 10.0), ("salt_pepper", 5.0), ("salt_pepper", 10.0)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()
    cfg = config.load(args.config) if args.config else config.RunConfig()
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for method, mcfg in (("cpsc", cfg), ("baseline", config.baseline(cfg))):
        outs = [experiments.run(mcfg, s, noise=NOISE) for s in seeds]
        cols = {"acc_fused": [o.final["acc_fused"] for o in outs]}
        for m in range(len(outs[0].final["acc_uni"])):
            cols[f"acc_uni_{m}"] = [o.final["acc_uni"][m] for o in outs]
        for kind, eps in NOISE:
            key = f"{kind}@{eps:g}"
            cols[key] = [o.corrupted[key] for o in outs]
        cols["rho_warmup"] = [np.mean(o.rho_warmup) for o in outs]
        cols["rho_final"] = [np.mean(o.rho_final) for o in outs]
        for metric, vals in cols.items():
            mu, sd = experiments.mean_std(vals)
            rows.append({"method": method, "metric": metric, "mean": mu, "std": sd, "n": len(vals)})
            print(f"{method:>8} {metric:>16} {mu:.4f} ± {sd:.4f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    experiments.write_csv(out / "compare.csv", rows, ["method", "metric", "mean", "std", "n"])


if __name__ == "__main__":
    main()
