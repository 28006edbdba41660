"""Ablation grid in the style of an RSC/GSC on-off table, plus warm-up and diversity switches.

    python3 scripts/ablation.py --seeds 0,1,2 --out runs/ablation
"""

import argparse
from pathlib import Path

from cpsc import config, experiments

VARIANTS = {
    "full": [],
    "no_rsc": ["rsc"],
    "no_gsc": ["gsc"],
    "no_rsc_no_gsc": ["rsc", "gsc"],
    "no_div": ["div"],
    "no_warmup": ["warmup"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    base = config.load(args.config) if args.config else config.RunConfig()
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for name, switches in VARIANTS.items():
        cfg = base
        for s in switches:
            cfg = config.apply_ablation(cfg, s)
        outs = [experiments.run(cfg, s) for s in seeds]
        for metric, vals in (
            ("acc_fused", [o.final["acc_fused"] for o in outs]),
            ("acc_uni_1", [o.final["acc_uni"][1] for o in outs]),
        ):
            mu, sd = experiments.mean_std(vals)
            rows.append({"variant": name, "metric": metric, "mean": mu, "std": sd, "n": len(vals)})
            print(f"{name:>14} {metric:>10} {mu:.4f} ± {sd:.4f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    experiments.write_csv(out / "ablation.csv", rows, ["variant", "metric", "mean", "std", "n"])


if __name__ == "__main__":
    main()
