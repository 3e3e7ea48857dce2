"""Start a loopback server, tune through it, report the traffic ledger.

    python scripts/serve_and_run.py --upload subspace
"""
import argparse

from bbtune.model import COMPACT, build_model
from bbtune.optimizer import RunConfig, run_bbtv2, task_stats
from bbtune.service import InProcessEvalApi, RemoteEvalApi, serve
from bbtune.tasks import make_few_shot_task


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--upload", choices=["prompt", "subspace"], default="prompt")
    ap.add_argument("--budget", type=int, default=1600)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = build_model(COMPACT)
    task = make_few_shot_task(n_classes=2, k=16, seed=args.seed)
    cfg = RunConfig(budget=args.budget, dim=50, popsize=20, seed=args.seed, upload=args.upload)
    with serve(model) as srv, RemoteEvalApi(srv.address) as api:
        remote = run_bbtv2(api, task, task_stats(api, task, cfg), cfg)
        traffic = srv.ledger.snapshot()
    local_api = InProcessEvalApi(model)
    local = run_bbtv2(local_api, task, task_stats(local_api, task, cfg), cfg)
    same = local.history.train_loss == remote.history.train_loss
    print(f"server {srv.address}: {traffic['requests']} requests, {traffic['upload']} B up, "
          f"{traffic['download']} B down ({traffic['upload'] / traffic['requests']:.0f} B per request)")
    print(f"final loss {remote.history.final_loss:.4f}; identical to in-process run: {same}")


if __name__ == "__main__":
    main()
