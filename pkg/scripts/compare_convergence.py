"""BBT vs BBTv2 on the 14-class toy task: aligned best-so-far loss curves.

    python scripts/compare_convergence.py --seeds 0 1 2 3 4 --out runs/convergence
"""
import argparse
import logging

import numpy as np

from bbtune.harness import ExperimentSpec, TaskSpec, compare_methods
from bbtune.optimizer import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--budget", type=int, default=8000)
    ap.add_argument("--dim", type=int, default=50)
    ap.add_argument("--classes", type=int, default=14)
    ap.add_argument("--out", default="runs/convergence")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    task = TaskSpec(n_classes=args.classes, k=16, seq_len=5)
    run = RunConfig(budget=args.budget, dim=args.dim, popsize=20, patience=None, dev_interval=0)
    specs = [ExperimentSpec(name=m, method=m, task=task, run=run, seeds=args.seeds, model="compact", out=args.out)
             for m in ("bbt", "bbtv2")]
    res = compare_methods(specs, out=args.out)
    curves = res["curves"]
    bbt_final = curves[-1, 0]
    hit = np.flatnonzero(curves[:, 1] <= bbt_final)
    print(f"mean final loss: bbt {bbt_final:.4f}  bbtv2 {curves[-1, 1]:.4f}")
    if hit.size:
        print(f"bbtv2 matches bbt's final loss after {hit[0] + 1} calls ({(hit[0] + 1) / args.budget:.0%} of budget)")
    for s in res["summaries"]:
        print(s["name"], "test", s["test_metric"])


if __name__ == "__main__":
    main()
