"""Derivative-free prompt search through an inference API.

``run_bbt`` tunes one input-layer prompt in a single random subspace.
``run_bbtv2`` tunes a deep prompt: one subspace and one CMA-ES instance per
layer, optimized alternately from the bottom layer up while the other layers
stay at their current values. Both only ever see label-word logits.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cma_es import CmaState, default_popsize
from .projection import KINDS, LayerStats, ProjectionMatrix, compute_sigma_a, sample_projection, uniform_bound
from .service import EvalApi, TransportError
from .tasks import FewShotTask, Split
from .wire import InferenceRequest, ProjectionSpec, PromptKind, RemoteError

log = logging.getLogger(__name__)

METRICS = ("accuracy", "f1")
UPLOADS = ("prompt", "subspace")


class BudgetError(ValueError):
    """The budget cannot pay for a single generation (BBT) or sweep (BBTv2)."""


class RunAborted(RuntimeError):
    """A run stopped on a transport failure; ``history`` holds what was done."""

    def __init__(self, message: str, history: "RunHistory"):
        super().__init__(message)
        self.history = history


def cross_entropy_loss(logits, labels) -> float:
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"need a non-empty (batch, C) logit matrix, got shape {z.shape}")
    if y.shape != (z.shape[0],):
        raise ValueError(f"{y.shape[0] if y.ndim else 0} labels for {z.shape[0]} examples")
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def predictions(logits) -> np.ndarray:
    """Argmax over label words; ties go to the lowest index."""
    return np.argmax(np.asarray(logits), axis=1)


def metric_from_logits(logits, labels, metric: str = "accuracy") -> float:
    """Accuracy, or binary F1 with class 1 as the positive class."""
    logits = np.asarray(logits)
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("empty dataset")
    pred = predictions(logits)
    if metric == "accuracy":
        return float(np.mean(pred == y))
    if metric == "f1":
        if logits.shape[1] != 2:
            raise ValueError(f"F1 is defined for 2 classes, got {logits.shape[1]}")
        tp = int(np.sum((pred == 1) & (y == 1)))
        fp = int(np.sum((pred == 1) & (y == 0)))
        fn = int(np.sum((pred == 0) & (y == 1)))
        # no positives predicted or present: perfect agreement
        return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


@dataclass
class RunConfig:
    """Knobs of one optimization run.

    ``dev_interval`` counts training calls between dev evaluations; ``None``
    means one full sweep over the model's layers (``popsize * L``) for both
    methods, ``0`` turns dev evaluation and early stopping off. ``patience``
    is in training calls; ``None`` disables early stopping.
    ``sigma_scale`` multiplies the matched projection std (ablations).
    """

    budget: int = 8000
    dim: int = 500
    popsize: int | None = 20
    alpha: float = 1.0
    sigma_z: float = 0.5
    seed: int = 0
    projection: str = "normal"
    uniform_bound: float | None = None
    sigma_scale: float = 1.0
    patience: int | None = 1000
    dev_interval: int | None = None
    metric: str = "accuracy"
    upload: str = "prompt"
    prompt_seed: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.budget < 1 or self.dim < 1:
            raise ValueError("budget and dim must be positive")
        if self.popsize is not None and self.popsize < 2:
            raise ValueError("popsize must be >= 2")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.dev_interval is not None and self.dev_interval < 0:
            raise ValueError("dev_interval must be >= 0")
        if self.projection not in KINDS:
            raise ValueError(f"unknown projection {self.projection!r}; choose from {KINDS}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; choose from {METRICS}")
        if self.upload not in UPLOADS:
            raise ValueError(f"unknown upload mode {self.upload!r}; choose from {UPLOADS}")
        if not (self.alpha > 0 and self.sigma_z > 0 and self.sigma_scale > 0):
            raise ValueError("alpha, sigma_z and sigma_scale must be positive")

    @property
    def lam(self) -> int:
        return self.popsize if self.popsize is not None else default_popsize(self.dim)

    @property
    def init_seed(self) -> int:
        """Seed of the initial prompt ``p^0``."""
        return self.seed if self.prompt_seed is None else self.prompt_seed

    def projection_seed(self, layer: int) -> int:
        return 1000 * self.seed + layer

    def cma_seed(self, layer: int) -> int:
        return 1000 * self.seed + 500 + layer


@dataclass
class Snapshot:
    """Dev-best subspace point of every tuned layer."""

    api_calls: int
    dev_metric: float
    z: np.ndarray  # (layers, d)


HISTORY_COLUMNS = ("api_calls", "layer", "train_loss", "train_acc", "dev_metric")


@dataclass
class RunHistory:
    """One row per training API call. ``dev_metric`` is filled on the row
    closing a dev-evaluation interval and empty elsewhere."""

    api_calls: list = field(default_factory=list)
    layer: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    dev_metric: list = field(default_factory=list)
    initial_dev: float | None = None
    best: Snapshot | None = None

    def __len__(self) -> int:
        return len(self.api_calls)

    def append(self, calls: int, layer: int, loss: float, acc: float) -> None:
        self.api_calls.append(calls)
        self.layer.append(layer)
        self.train_loss.append(loss)
        self.train_acc.append(acc)
        self.dev_metric.append(math.nan)

    def best_loss_curve(self) -> np.ndarray:
        """Running minimum of the training loss, one entry per call."""
        return np.minimum.accumulate(np.asarray(self.train_loss, dtype=float))

    @property
    def final_loss(self) -> float:
        """Best training loss seen over the whole run."""
        return float(np.min(self.train_loss))

    def calls_to_reach(self, target: float) -> int | None:
        """First API-call count at which the best-so-far loss is ``<= target``."""
        hit = np.flatnonzero(self.best_loss_curve() <= target)
        return int(self.api_calls[hit[0]]) if hit.size else None

    def dev_points(self) -> list[tuple[int, float]]:
        return [(c, m) for c, m in zip(self.api_calls, self.dev_metric) if not math.isnan(m)]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in zip(self.api_calls, self.layer, self.train_loss, self.train_acc, self.dev_metric):
            c, j, loss, acc, dev = row
            w.writerow([c, j, repr(float(loss)), repr(float(acc)), "" if math.isnan(dev) else repr(float(dev))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "RunHistory":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "RunHistory":
        rows = list(csv.DictReader(io.StringIO(text)))
        h = cls()
        for r in rows:
            h.append(int(r["api_calls"]), int(r["layer"]), float(r["train_loss"]), float(r["train_acc"]))
            if r["dev_metric"]:
                h.dev_metric[-1] = float(r["dev_metric"])
        return h

    def to_json(self) -> dict:
        out = {c: [None if isinstance(v, float) and math.isnan(v) else v for v in getattr(self, c)]
               for c in HISTORY_COLUMNS}
        out["initial_dev"] = self.initial_dev
        if self.best is not None:
            out["best"] = {"api_calls": self.best.api_calls, "dev_metric": self.best.dev_metric,
                           "z": self.best.z.tolist()}
        return out


@dataclass
class RunResult:
    method: str
    config: RunConfig
    history: RunHistory
    z: np.ndarray  # (layers, d) returned subspace point (dev-best, else final)
    projections: list  # ProjectionSpec per tuned layer
    offsets: np.ndarray  # (layers, n_p, H) projected prompt offsets for ``z``
    train_calls: int
    dev_calls: int
    stopped_early: bool

    @property
    def prompt_kind(self) -> PromptKind:
        return PromptKind.SHALLOW if self.method == "bbt" else PromptKind.DEEP

    def payload(self) -> "PromptPayload":
        return PromptPayload(self.prompt_kind, self.offsets.astype(np.float32), (), self.config.init_seed)

    def to_json(self) -> dict:
        """Everything needed to rebuild the returned prompt exactly."""
        return {
            "method": self.method,
            "config": asdict(self.config),
            "prompt_seed": self.config.init_seed,
            "z": self.z.tolist(),
            "projections": [asdict(p) for p in self.projections],
            "train_calls": self.train_calls,
            "dev_calls": self.dev_calls,
            "stopped_early": self.stopped_early,
        }


def offsets_from_snapshot(data: dict, prompt_len: int, hidden: int) -> np.ndarray:
    """Re-project a saved ``RunResult.to_json`` record to prompt offsets."""
    z = np.asarray(data["z"], dtype=float)
    out = np.empty((len(z), prompt_len, hidden))
    for j, p in enumerate(data["projections"]):
        A = sample_projection(prompt_len * hidden, z.shape[1], p["kind"], p["param"], p["seed"])
        out[j] = A(z[j]).reshape(prompt_len, hidden)
    return out


@dataclass(frozen=True)
class PromptPayload:
    """What a request carries about the prompt."""

    kind: PromptKind
    values: np.ndarray
    projections: tuple = ()
    prompt_seed: int = 0

    def request(self, split: Split, label_ids) -> InferenceRequest:
        return InferenceRequest(split.input_ids, split.attention_mask, split.mask_pos, label_ids, self.kind,
                                self.values, self.projections, self.prompt_seed)


NO_PROMPT = PromptPayload(PromptKind.NONE, np.zeros((0, 0, 0), np.float32))


def evaluate_metric(api: EvalApi, prompt: PromptPayload, dataset: Split, label_ids, metric: str = "accuracy",
                    purpose: str = "eval") -> float:
    """Score a prompt on a dataset with one metered API call."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if metric == "f1" and len(label_ids) != 2:
        raise ValueError(f"F1 is defined for 2 classes, got {len(label_ids)}")
    logits = api.evaluate(prompt.request(dataset, label_ids), purpose)
    return metric_from_logits(logits, dataset.labels, metric)


def make_projection(cfg: RunConfig, D: int, stats: LayerStats, layer: int) -> ProjectionMatrix:
    if cfg.projection == "normal":
        param = compute_sigma_a(cfg.alpha, stats.sigma_hat, cfg.dim, cfg.sigma_z) * cfg.sigma_scale
    else:
        param = (cfg.uniform_bound or uniform_bound(cfg.dim)) * cfg.sigma_scale
    return sample_projection(D, cfg.dim, cfg.projection, param, cfg.projection_seed(layer))


def task_stats(api: EvalApi, task: FewShotTask, cfg: RunConfig) -> list:
    """Per-layer statistics of the train split with the run's initial prompt."""
    return api.layer_stats(task.train.input_ids, task.train.attention_mask, cfg.init_seed)


class _Search:
    """Shared loop. ``layers`` tuned prompt layers, each with its own
    projection and CMA-ES state; one step asks layer ``j`` for a population,
    spends one call per candidate, tells, and moves layer ``j`` to the new
    distribution mean."""

    def __init__(self, method: str, api: EvalApi, task: FewShotTask, stats: list, cfg: RunConfig, layers: int):
        self.method, self.api, self.task, self.cfg, self.layers = method, api, task, cfg, layers
        info = api.info()
        self.n_layers_model = info.layers
        self.n_p, self.hidden = info.prompt_len, info.hidden
        D = self.n_p * self.hidden
        self.proj = [make_projection(cfg, D, stats[j], j) for j in range(layers)]
        self.specs = [ProjectionSpec(A.kind, A.seed, A.param) for A in self.proj]
        self.es = [CmaState(cfg.dim, cfg.sigma_z, cfg.lam, seed=cfg.cma_seed(j)) for j in range(layers)]
        self.z = np.zeros((layers, cfg.dim))
        self.offsets = np.zeros((layers, self.n_p, self.hidden))
        if layers == 1 and method == "bbt":
            self.kind = PromptKind.SHALLOW_SUBSPACE if cfg.upload == "subspace" else PromptKind.SHALLOW
        else:
            self.kind = PromptKind.DEEP_SUBSPACE if cfg.upload == "subspace" else PromptKind.DEEP
        self.history = RunHistory()
        self.used = 0
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def payload(self, z: np.ndarray, offsets: np.ndarray) -> PromptPayload:
        if self.kind.subspace:
            return PromptPayload(self.kind, z[:, None, :].astype(np.float32), tuple(self.specs), self.cfg.init_seed)
        return PromptPayload(self.kind, offsets.astype(np.float32), (), self.cfg.init_seed)

    def project(self, j: int, zj: np.ndarray) -> np.ndarray:
        return self.proj[j](zj).reshape(self.n_p, self.hidden)

    def _evaluate(self, reqs: list, purpose: str) -> list:
        if self._pool is None:
            return self.api.evaluate_many(reqs, purpose)
        return list(self._pool.map(lambda r: self.api.evaluate(r, purpose), reqs))

    def step(self, j: int) -> None:
        """One CMA-ES generation on layer ``j``; other layers untouched."""
        train = self.task.train
        xs = self.es[j].ask()
        reqs = []
        for x in xs:
            z, off = self.z.copy(), self.offsets.copy()
            z[j] = x
            if not self.kind.subspace:
                off[j] = self.project(j, x)
            reqs.append(self.payload(z, off).request(train, self.task.label_ids))
        losses = []
        for logits in self._evaluate(reqs, "train"):
            self.used += 1
            loss = cross_entropy_loss(logits, train.labels)
            losses.append(loss)
            self.history.append(self.used, j, loss, metric_from_logits(logits, train.labels))
        self.es[j].tell(xs, losses)
        self.z[j] = self.es[j].mean
        self.offsets[j] = self.project(j, self.z[j])

    def dev_metric(self) -> float:
        return evaluate_metric(self.api, self.payload(self.z, self.offsets), self.task.dev, self.task.label_ids,
                               self.cfg.metric, purpose="dev")

    def run(self) -> RunResult:
        cfg, lam = self.cfg, self.cfg.lam
        cost = lam * self.layers
        if self.task.n_classes < 2:
            raise ValueError("need at least 2 classes; a 1-class loss is constant")
        if cfg.budget < cost:
            raise BudgetError(f"budget {cfg.budget} cannot pay for one {'sweep' if self.layers > 1 else 'generation'}"
                              f" of {cost} calls")
        interval = lam * self.n_layers_model if cfg.dev_interval is None else cfg.dev_interval
        dev_calls0 = self.api.calls["dev"]
        stopped = False
        try:
            if interval:
                best = self.dev_metric()
                self.history.initial_dev = best
                self.history.best = Snapshot(0, best, self.z.copy())
                last_gain, next_dev = 0, interval
            while self.used + cost <= cfg.budget:
                for j in range(self.layers):  # bottom to top
                    self.step(j)
                if interval and self.used >= next_dev:
                    while next_dev <= self.used:
                        next_dev += interval
                    m = self.dev_metric()
                    self.history.dev_metric[-1] = m
                    if m > best:
                        best, last_gain = m, self.used
                        self.history.best = Snapshot(self.used, m, self.z.copy())
                    log.info("%s calls=%d loss=%.4f dev=%.4f", self.method, self.used, self.history.final_loss, m)
                    if cfg.patience is not None and self.used - last_gain >= cfg.patience:
                        stopped = True
                        break
        except (TransportError, RemoteError) as e:
            raise RunAborted(f"{self.method} aborted after {self.used} calls: {e}", self.history) from e
        finally:
            if self._pool is not None:
                self._pool.shutdown()
        z = self.history.best.z if interval else self.z.copy()
        offsets = np.stack([self.project(j, z[j]) for j in range(self.layers)])
        return RunResult(self.method, cfg, self.history, z, self.specs, offsets, self.used,
                         self.api.calls["dev"] - dev_calls0, stopped)


def run_bbt(api: EvalApi, task: FewShotTask, model_stats, cfg: RunConfig) -> RunResult:
    """Tune an input-layer prompt ``A z + p_0`` in one random subspace.

    ``model_stats`` is the word-embedding :class:`LayerStats` (or a list whose
    first entry is).
    """
    stats = [model_stats if isinstance(model_stats, LayerStats) else model_stats[0]]
    return _Search("bbt", api, task, stats, cfg, layers=1).run()


def run_bbtv2(api: EvalApi, task: FewShotTask, stats: list, cfg: RunConfig) -> RunResult:
    """Tune a deep prompt layer by layer.

    ``stats`` has ``L + 1`` entries as returned by ``layer_hidden_stats``;
    layer ``j`` is sized by entry ``j``, the statistics of what block ``j``
    reads (entry 0 is the word-embedding table).
    """
    L = api.info().layers
    if len(stats) != L + 1:
        raise ValueError(f"expected {L + 1} layer statistics for a {L}-layer model, got {len(stats)}")
    return _Search("bbtv2", api, task, list(stats), cfg, layers=L).run()
