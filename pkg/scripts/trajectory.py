"""Per-epoch test accuracy, conformal threshold and diversity loss for CPSC and the baseline.

Shows where self-calibrating training peaks and where it departs from the baseline.

    python3 scripts/trajectory.py --seed 0 --out runs/trajectory
"""

import argparse
from pathlib import Path

from cpsc import config, experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/trajectory")
    args = ap.parse_args()
    cfg = config.load(args.config) if args.config else config.RunConfig()
    rows = []
    for method, mcfg in (("cpsc", cfg), ("baseline", config.baseline(cfg))):
        res = experiments.run(mcfg, args.seed, keep_result=True).result
        for r in res.reports:
            if r.phase == "warmup":
                continue
            rows.append({"method": method, "epoch": r.epoch, "test_acc_fused": r.test_acc_fused,
                         "test_acc_uni_1": r.test_acc_uni[1], "q_hat": r.q_hat,
                         "loss_div_0": r.loss_div[0], "loss_div_1": r.loss_div[1]})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    experiments.write_csv(out / f"trajectory_seed{args.seed}.csv", rows)
    for r in rows[::5]:
        print(f"{r['method']:>8} epoch {r['epoch']:2d} acc {r['test_acc_fused']:.3f} "
              f"weak {r['test_acc_uni_1']:.3f} q_hat {r['q_hat']:.3f} div1 {r['loss_div_1']:+.2f}")


if __name__ == "__main__":
    main()
