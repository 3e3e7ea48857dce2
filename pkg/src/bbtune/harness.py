"""Experiment runner: tasks x methods x seeds, with CSV/JSON artifacts.

Output layout::

    <out>/<name>/<seed>/history.csv    per-call training log
    <out>/<name>/<seed>/result.json    returned prompt (subspace point + projection seeds)
    <out>/<name>/results.csv           one row per seed
    <out>/<name>/summary.json          mean and std across seeds
"""
from __future__ import annotations

import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .model import COMPACT, ModelConfig, build_model, load_model
from .optimizer import RunAborted, RunConfig, RunHistory, evaluate_metric, run_bbt, run_bbtv2, task_stats
from .service import EvalApi, InProcessEvalApi, RemoteEvalApi
from .tasks import make_few_shot_task

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

METHODS = {"bbt": run_bbt, "bbtv2": run_bbtv2}
PRESETS = {"default": ModelConfig(), "compact": COMPACT}
RESULT_COLUMNS = ("seed", "status", "train_calls", "dev_calls", "final_train_loss", "dev_metric", "test_metric",
                  "seconds")


@dataclass
class TaskSpec:
    kind: str = "topic"
    n_classes: int = 2
    k: int = 16
    seq_len: int = 8
    test_per_class: int = 50


@dataclass
class ExperimentSpec:
    """One method on one task generator over several seeds.

    ``transport`` is ``"in-process"`` or ``"remote:HOST:PORT"``. ``model`` is
    a preset name or a dict of :class:`ModelConfig` fields; ``checkpoint``
    overrides it for in-process runs.
    """

    name: str = "experiment"
    method: str = "bbtv2"
    task: TaskSpec = field(default_factory=TaskSpec)
    run: RunConfig = field(default_factory=RunConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    model: object = "default"
    checkpoint: str | None = None
    transport: str = "in-process"
    out: str = "runs"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if not self.seeds:
            raise ValueError("seed list is empty")
        if self.transport != "in-process" and not self.transport.startswith("remote:"):
            raise ValueError(f"transport must be 'in-process' or 'remote:HOST:PORT', got {self.transport!r}")

    def model_config(self) -> ModelConfig:
        if isinstance(self.model, ModelConfig):
            return self.model
        if isinstance(self.model, str):
            return PRESETS[self.model]
        base = PRESETS[self.model.get("preset", "default")]
        return replace(base, **{k: v for k, v in self.model.items() if k != "preset"})

    @property
    def directory(self) -> Path:
        return Path(self.out) / self.name


def open_api(spec: ExperimentSpec, model=None) -> EvalApi:
    if spec.transport.startswith("remote:"):
        return RemoteEvalApi(spec.transport[len("remote:"):])
    if model is None:
        model = load_model(spec.checkpoint) if spec.checkpoint else build_model(spec.model_config())
    return InProcessEvalApi(model)


def _stats(values) -> dict:
    a = np.asarray(values, dtype=float)
    return {"mean": float(a.mean()), "std": float(a.std()), "n": int(a.size)} if a.size else {"n": 0}


def summarize(rows: list[dict]) -> dict:
    """Mean and (population) std across the seeds that completed."""
    ok = [r for r in rows if r["status"] == "ok"]
    return {
        "complete": len(ok) == len(rows),
        "seeds_ok": [r["seed"] for r in ok],
        "seeds_failed": [r["seed"] for r in rows if r["status"] != "ok"],
        "test_metric": _stats([r["test_metric"] for r in ok]),
        "final_train_loss": _stats([r["final_train_loss"] for r in ok]),
    }


def run_one(spec: ExperimentSpec, seed: int, api: EvalApi):
    """One seed: build the split, gather statistics, run, score on test."""
    vocab = api.info().vocab_size
    t = spec.task
    task = make_few_shot_task(vocab, t.n_classes, t.k, t.seq_len, seed, t.kind, t.test_per_class)
    cfg = replace(spec.run, seed=seed)
    result = METHODS[spec.method](api, task, task_stats(api, task, cfg), cfg)
    test = evaluate_metric(api, result.payload(), task.test, task.label_ids, cfg.metric, purpose="test")
    return result, test


def run_experiment(spec: ExperimentSpec, model=None) -> dict:
    """Run every seed, write the artifacts, return the summary record.

    A seed that fails is recorded with its error and excluded from the
    statistics; ``summary["complete"]`` is then false.
    """
    root = spec.directory
    root.mkdir(parents=True, exist_ok=True)
    api = open_api(spec, model)
    rows = []
    try:
        for seed in spec.seeds:
            seed_dir = root / str(seed)
            seed_dir.mkdir(exist_ok=True)
            t0 = time.perf_counter()
            row = {"seed": seed, "status": "ok", "train_calls": 0, "dev_calls": 0, "final_train_loss": math.nan,
                   "dev_metric": math.nan, "test_metric": math.nan, "seconds": 0.0}
            try:
                result, test = run_one(spec, seed, api)
            except RunAborted as e:
                e.history.to_csv(seed_dir / "history.csv")
                row["status"] = f"aborted: {e}"
                log.error("seed %s: %s", seed, e)
            except Exception as e:  # recorded per seed, the sweep goes on
                row["status"] = f"failed: {type(e).__name__}: {e}"
                log.exception("seed %s failed", seed)
            else:
                h = result.history
                h.to_csv(seed_dir / "history.csv")
                (seed_dir / "result.json").write_text(json.dumps(result.to_json(), indent=1))
                row.update(train_calls=result.train_calls, dev_calls=result.dev_calls, final_train_loss=h.final_loss,
                           dev_metric=h.best.dev_metric if h.best else math.nan, test_metric=test)
            row["seconds"] = round(time.perf_counter() - t0, 3)
            rows.append(row)
            log.info("%s seed %s: %s", spec.name, seed, row)
    finally:
        api.close()
    write_results(rows, root / "results.csv")
    summary = {"name": spec.name, "method": spec.method, "task": asdict(spec.task), "run": asdict(spec.run),
               **summarize(rows)}
    (root / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def write_results(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_results(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"seed": int(r["seed"]), "status": r["status"], "train_calls": int(r["train_calls"]),
                         "dev_calls": int(r["dev_calls"]), "final_train_loss": float(r["final_train_loss"]),
                         "dev_metric": float(r["dev_metric"]), "test_metric": float(r["test_metric"]),
                         "seconds": float(r["seconds"])})
    return rows


def load_histories(spec: ExperimentSpec) -> dict:
    return {s: RunHistory.from_csv(spec.directory / str(s) / "history.csv") for s in spec.seeds
            if (spec.directory / str(s) / "history.csv").exists()}


def aligned_curves(histories: list[RunHistory], budget: int) -> np.ndarray:
    """Mean over runs of the best-so-far loss at every call ``1..budget``.

    A run that ended early keeps its last value.
    """
    out = np.full((len(histories), budget), np.nan)
    for i, h in enumerate(histories):
        curve = h.best_loss_curve()
        calls = np.asarray(h.api_calls)
        idx = np.searchsorted(calls, np.arange(1, budget + 1), side="right") - 1
        valid = idx >= 0
        out[i, valid] = curve[idx[valid]]
    return out.mean(axis=0)


def compare_methods(specs: list[ExperimentSpec], out=None, model=None) -> dict:
    """Run specs that share task and budget; write aligned loss curves.

    Returns ``{"curves": (budget, n_specs) array, "names": [...], "summaries": [...]}``
    and writes ``compare.csv`` (curves) and ``compare_summary.json``.
    """
    if not specs:
        raise ValueError("nothing to compare")
    budgets = {s.run.budget for s in specs}
    if len(budgets) > 1:
        raise ValueError(f"specs have different budgets: {sorted(budgets)}")
    if len({json.dumps(asdict(s.task), sort_keys=True) for s in specs}) > 1:
        raise ValueError("specs use different tasks")
    budget = budgets.pop()
    summaries, columns = [], []
    for s in specs:
        summaries.append(run_experiment(s, model))
        columns.append(aligned_curves(list(load_histories(s).values()), budget))
    names = [s.name for s in specs]
    curves = np.stack(columns, axis=1)
    out = Path(out or specs[0].out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["api_calls", *names])
        for c in range(budget):
            w.writerow([c + 1, *("" if math.isnan(v) else repr(float(v)) for v in curves[c])])
    (out / "compare_summary.json").write_text(json.dumps(summaries, indent=1))
    return {"curves": curves, "names": names, "summaries": summaries}


def sweep(spec: ExperimentSpec, param: str, values: list, model=None) -> list[dict]:
    """One experiment per value of a :class:`RunConfig` field; writes ``sweep.csv``."""
    if param not in {f.name for f in fields(RunConfig)}:
        raise ValueError(f"unknown run parameter {param!r}")
    rows = []
    for v in values:
        s = replace(spec, name=f"{spec.name}/{param}={v}", run=replace(spec.run, **{param: v}))
        summary = run_experiment(s, model)
        rows.append({param: v, "test_mean": summary["test_metric"].get("mean", math.nan),
                     "test_std": summary["test_metric"].get("std", math.nan),
                     "loss_mean": summary["final_train_loss"].get("mean", math.nan), "complete": summary["complete"]})
    path = spec.directory / "sweep.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def load_spec(path) -> ExperimentSpec:
    """Read an :class:`ExperimentSpec` from TOML (tables ``[task]``, ``[run]``, ``[model]``)."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return spec_from_dict(data)


def spec_from_dict(data: dict) -> ExperimentSpec:
    data = dict(data)
    known = {f.name for f in fields(ExperimentSpec)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "task" in data:
        data["task"] = TaskSpec(**data["task"])
    if "run" in data:
        data["run"] = RunConfig(**data["run"])
    return ExperimentSpec(**data)
