"""Command line: ``python -m bbtune <command>``.

Settings resolve in order: built-in defaults, then the TOML file given with
``--config``, then command-line flags. ``BBTUNE_ADDRESS`` supplies the
server address for ``serve`` and for ``--transport remote`` when no address
is given; ``BBTUNE_LOG_LEVEL`` sets the log level.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from dataclasses import asdict, replace

from .harness import ExperimentSpec, TaskSpec, compare_methods, load_spec, open_api, run_experiment, sweep
from .model import build_model, load_model, save_model
from .service import InProcessEvalApi, serve
from .tasks import make_few_shot_task, save_task

DEFAULT_ADDRESS = "127.0.0.1:8765"

# flag -> RunConfig field
RUN_FLAGS = {"budget": "budget", "dim": "dim", "alpha": "alpha", "sigma_z": "sigma_z", "proj": "projection",
             "popsize": "popsize", "patience": "patience", "upload": "upload"}
TASK_FLAGS = {"classes": "n_classes", "shots": "k", "seq_len": "seq_len", "task": "kind"}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment file")
    p.add_argument("--name")
    p.add_argument("--method", choices=["bbt", "bbtv2"])
    p.add_argument("--seed", type=int, action="append", help="repeatable; replaces the seed list")
    p.add_argument("--budget", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--prompt-len", type=int, help="model prompt length n_p")
    p.add_argument("--alpha", type=float)
    p.add_argument("--sigma-z", type=float)
    p.add_argument("--popsize", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--proj", choices=["uniform", "normal"])
    p.add_argument("--upload", choices=["prompt", "subspace"])
    p.add_argument("--task", choices=["sentiment", "topic", "pair"])
    p.add_argument("--classes", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--preset", choices=["default", "compact"])
    p.add_argument("--transport", help="in-process | remote | remote:HOST:PORT")
    p.add_argument("--out")


def build_spec(args) -> ExperimentSpec:
    spec = load_spec(args.config) if args.config else ExperimentSpec()
    run = replace(spec.run, **{f: getattr(args, a) for a, f in RUN_FLAGS.items() if getattr(args, a) is not None})
    task = replace(spec.task, **{f: getattr(args, a) for a, f in TASK_FLAGS.items() if getattr(args, a) is not None})
    model = spec.model
    if args.preset or args.prompt_len:
        model = dict(model) if isinstance(model, dict) else {"preset": model} if isinstance(model, str) else asdict(model)
        if args.preset:
            model["preset"] = args.preset
        if args.prompt_len:
            model["prompt_len"] = args.prompt_len
    transport = args.transport or spec.transport
    if transport == "remote":
        transport = "remote:" + os.environ.get("BBTUNE_ADDRESS", DEFAULT_ADDRESS)
    return replace(spec, run=run, task=task, model=model, transport=transport,
                   name=args.name or spec.name, method=args.method or spec.method,
                   seeds=args.seed or spec.seeds, out=args.out or spec.out)


def cmd_run(args) -> int:
    summary = run_experiment(build_spec(args))
    print(json.dumps(summary, indent=1))
    return 0 if summary["complete"] else 1


def cmd_sweep(args) -> int:
    values = [type_cast(v) for v in args.values.split(",")]
    rows = sweep(build_spec(args), args.param, values)
    for r in rows:
        print(json.dumps(r))
    return 0 if all(r["complete"] for r in rows) else 1


def type_cast(v: str):
    for t in (int, float):
        try:
            return t(v)
        except ValueError:
            pass
    return v


def cmd_compare(args) -> int:
    base = build_spec(args)
    specs = [replace(base, method=m, name=f"{base.name}-{m}") for m in args.methods.split(",")]
    res = compare_methods(specs, out=base.out)
    for s in res["summaries"]:
        print(s["name"], json.dumps(s["final_train_loss"]), json.dumps(s["test_metric"]))
    return 0


def cmd_serve(args) -> int:
    if args.checkpoint:
        model = load_model(args.checkpoint)
    else:
        model = build_model(build_spec(args).model_config())
    address = args.bind or os.environ.get("BBTUNE_ADDRESS", DEFAULT_ADDRESS)
    server = serve(model, address, args.max_batch)
    print(f"serving on {server.address}", flush=True)
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    try:
        done.wait()
    except KeyboardInterrupt:
        pass
    server.stop()
    print(json.dumps(server.ledger.snapshot()))
    return 0


def cmd_gen_task(args) -> int:
    t = build_spec(args).task
    task = make_few_shot_task(args.vocab, t.n_classes, t.k, t.seq_len, args.seed[0] if args.seed else 0, t.kind,
                              t.test_per_class)
    save_task(task, args.path)
    print(f"{task.name}: train={len(task.train)} dev={len(task.dev)} test={len(task.test)} -> {args.path}")
    return 0


def cmd_gen_model(args) -> int:
    model = build_model(build_spec(args).model_config())
    save_model(model, args.path)
    print(f"checkpoint {args.path} crc32={model.checksum():08x}")
    return 0


def cmd_stats(args) -> int:
    spec = build_spec(args)
    seed = spec.seeds[0]
    with open_api(spec) as api:
        t: TaskSpec = spec.task
        task = make_few_shot_task(api.info().vocab_size, t.n_classes, t.k, t.seq_len, seed, t.kind)
        for s in api.layer_stats(task.train.input_ids, task.train.attention_mask, seed):
            print(f"layer {s.layer}: mu={s.mu_hat:.6f} sigma={s.sigma_hat:.6f} (clip rounds {s.clip_rounds})")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbtune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment over its seeds")
    _common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="one experiment per value of a run parameter")
    _common(p)
    p.add_argument("--param", default="dim")
    p.add_argument("--values", default="10,50,100,200,500,1000")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("compare", help="run several methods on one task, align loss curves")
    _common(p)
    p.add_argument("--methods", default="bbt,bbtv2")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("serve", help="serve a model over the framed protocol")
    _common(p)
    p.add_argument("--bind", help=f"HOST:PORT (default $BBTUNE_ADDRESS or {DEFAULT_ADDRESS})")
    p.add_argument("--checkpoint")
    p.add_argument("--max-batch", type=int)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("gen-task", help="write a synthetic task file")
    _common(p)
    p.add_argument("path")
    p.add_argument("--vocab", type=int, default=128)
    p.set_defaults(fn=cmd_gen_task)

    p = sub.add_parser("gen-model", help="write a model checkpoint")
    _common(p)
    p.add_argument("path")
    p.set_defaults(fn=cmd_gen_model)

    p = sub.add_parser("stats", help="print per-layer hidden-state statistics")
    _common(p)
    p.set_defaults(fn=cmd_stats)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BBTUNE_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = make_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
