"""Projection-scale ablation: BBT with sigma_A scaled by several factors.

    python scripts/ablation_sigma.py --scales 0.1 0.3 1 3
"""
import argparse

from bbtune.harness import ExperimentSpec, TaskSpec, sweep
from bbtune.optimizer import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scales", type=float, nargs="+", default=[0.1, 0.3, 1.0, 3.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--budget", type=int, default=3000)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    spec = ExperimentSpec(name="sigma", method="bbt", task=TaskSpec(n_classes=2, k=16),
                          run=RunConfig(budget=args.budget, dim=50, popsize=20, patience=None, dev_interval=0),
                          seeds=args.seeds, model="compact", out=args.out)
    for row in sweep(spec, "sigma_scale", args.scales):
        print(f"sigma_scale={row['sigma_scale']:<5} loss {row['loss_mean']:.3e}  "
              f"test {row['test_mean']:.3f} +- {row['test_std']:.3f}")


if __name__ == "__main__":
    main()
