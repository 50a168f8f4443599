"""Mean test F1 per fusion mode over several seeds on a synthetic spec.

    python scripts/run_fusion_ablation.py configs/fusion_rho1.ini --seeds 5
"""
import argparse
import csv
import sys
import time

import numpy as np

from coupled_ssm.config import load_run_config
from coupled_ssm.tasks import compare_fusions


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--fusions", default="coupled,average,concat")
    ap.add_argument("--out", default=None, help="per-seed CSV")
    args = ap.parse_args(argv)

    cfg = load_run_config(args.config)
    fusions = args.fusions.split(",")
    rows = []
    t0 = time.perf_counter()

    def report(fusion, seed, rep):
        rows.append([fusion, seed, rep.f1, rep.mae, rep.corr])
        print(f"{fusion:<16} seed {seed}  f1 {rep.f1:.4f}  mae {rep.mae:.4f}  corr {rep.corr:.4f}  [{time.perf_counter() - t0:.0f}s]", flush=True)

    seeds = range(cfg.seed, cfg.seed + args.seeds)
    res = compare_fusions(cfg.model, cfg.task, cfg.optim, fusions, seeds, on_result=report)
    print()
    for f in fusions:
        f1 = np.array([r.f1 for r in res[f]])
        print(f"{f:<16} mean f1 {100 * f1.mean():.2f} +/- {100 * f1.std():.2f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fusion", "seed", "f1", "mae", "corr"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
