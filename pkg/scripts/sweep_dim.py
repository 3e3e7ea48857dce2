"""Subspace dimension sweep for one method (default BBTv2).

    python scripts/sweep_dim.py --dims 5 10 50 100 --method bbtv2
"""
import argparse

from bbtune.harness import ExperimentSpec, TaskSpec, sweep
from bbtune.optimizer import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, nargs="+", default=[5, 10, 50, 100, 200])
    ap.add_argument("--method", choices=["bbt", "bbtv2"], default="bbtv2")
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--budget", type=int, default=4000)
    ap.add_argument("--out", default="runs/dim")
    args = ap.parse_args()

    # popsize follows the 4 + 3 ln d rule for each dimension
    spec = ExperimentSpec(name=f"dim-{args.method}", method=args.method, task=TaskSpec(n_classes=args.classes),
                          run=RunConfig(budget=args.budget, popsize=None), seeds=args.seeds, model="compact",
                          out=args.out)
    for row in sweep(spec, "dim", args.dims):
        print(f"d={row['dim']:<5} loss {row['loss_mean']:.4f}  test {row['test_mean']:.3f} +- {row['test_std']:.3f}")


if __name__ == "__main__":
    main()
