"""Synthetic few-shot classification tasks over the toy vocabulary.

Each class is a vocabulary topic: an example plants a few topic words of its
class among filler and distractor tokens, and ends with the mask token. The
verbalizer maps a class to its topic's label word.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import CLS, MASK, PAD, SEP, Vocab


@dataclass(frozen=True, eq=False)
class Split:
    input_ids: np.ndarray  # (N, T) int
    attention_mask: np.ndarray  # (N, T) bool
    mask_pos: np.ndarray  # (N,)
    labels: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Split":
        return Split(self.input_ids[idx], self.attention_mask[idx], self.mask_pos[idx], self.labels[idx])


@dataclass(frozen=True, eq=False)
class FewShotTask:
    name: str
    train: Split
    dev: Split
    test: Split
    label_ids: np.ndarray  # verbalizer: class -> label-word token id
    k: int

    @property
    def n_classes(self) -> int:
        return len(self.label_ids)


GENERATORS = ("sentiment", "topic", "pair")


def _pad(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _single(vocab: Vocab, rng, c: int, seq_len: int, n_motif: int, distractor_p: float) -> list[int]:
    body_len = seq_len - 2
    body = list(rng.choice(vocab.fillers, size=body_len))
    for i in range(body_len):
        if rng.random() < distractor_p:
            t = int(rng.integers(vocab.n_topics))
            body[i] = int(rng.choice(vocab.topic_words(t)))
    slots = rng.choice(body_len, size=min(n_motif, body_len), replace=False)
    for s in slots:
        body[s] = int(rng.choice(vocab.topic_words(c)))
    return [CLS, *map(int, body), MASK]


def _pair(vocab: Vocab, rng, c: int, seq_len: int, topics: np.ndarray) -> list[int]:
    half = max(1, (seq_len - 3) // 2)
    t1 = int(rng.choice(topics))
    t2 = t1 if c == 1 else int(rng.choice(topics[topics != t1]))

    def seg(t):
        body = list(map(int, rng.choice(vocab.fillers, size=half)))
        body[int(rng.integers(half))] = int(rng.choice(vocab.topic_words(t)))
        return body

    return [CLS, *seg(t1), SEP, *seg(t2), MASK]


def make_few_shot_task(
    vocab_size: int = 128,
    n_classes: int = 2,
    k: int = 16,
    seq_len: int = 8,
    seed: int = 0,
    kind: str = "topic",
    test_per_class: int = 50,
    n_motif: int = 2,
    distractor_p: float = 0.25,
) -> FewShotTask:
    """Draw ``k`` train and ``k`` dev examples per class plus a balanced test set.

    ``kind="sentiment"`` is the 2-class analogue, ``"topic"`` the many-label
    one, ``"pair"`` a 2-class task over two segments (label 1 when both
    segments share a topic).
    """
    vocab = Vocab.for_size(vocab_size)
    if kind not in GENERATORS:
        raise ValueError(f"unknown task kind {kind!r}; choose from {GENERATORS}")
    if kind in ("sentiment", "pair") and n_classes != 2:
        raise ValueError(f"{kind} tasks have exactly 2 classes")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if k < 1:
        raise ValueError("k must be >= 1")
    if n_classes > vocab.n_topics:
        raise ValueError(f"{n_classes} classes exceed the {vocab.n_topics} label words available")
    if seq_len < 4:
        raise ValueError("seq_len must be >= 4")
    rng = np.random.default_rng(seed)
    # sentiment uses a fixed topic pair; topic tasks take the first C topics
    topics = np.arange(n_classes)
    label_ids = np.array([vocab.label_word(int(t)) for t in topics])
    pair_topics = np.arange(vocab.n_topics)

    def draw(per_class: int) -> Split:
        seqs, labels = [], []
        for c in range(n_classes):
            for _ in range(per_class):
                if kind == "pair":
                    seqs.append(_pair(vocab, rng, c, seq_len, pair_topics))
                else:
                    seqs.append(_single(vocab, rng, int(topics[c]), seq_len, n_motif, distractor_p))
                labels.append(c)
        order = rng.permutation(len(labels))
        ids, mask = _pad([seqs[i] for i in order])
        mask_pos = mask.sum(axis=1) - 1
        return Split(ids, mask, mask_pos, np.asarray(labels)[order])

    train, dev = draw(k), draw(k)
    test = draw(max(test_per_class, k))
    return FewShotTask(f"{kind}-{n_classes}c-{k}shot-s{seed}", train, dev, test, label_ids, k)


def save_task(task: FewShotTask, path: str | Path) -> None:
    """Line-delimited JSON: one header line, then one record per example."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"name": task.name, "k": task.k, "label_ids": task.label_ids.tolist()}) + "\n")
        for split_name in ("train", "dev", "test"):
            split = getattr(task, split_name)
            for i in range(len(split)):
                n = int(split.attention_mask[i].sum())
                rec = {
                    "split": split_name,
                    "input_ids": split.input_ids[i, :n].tolist(),
                    "mask_pos": int(split.mask_pos[i]),
                    "label": int(split.labels[i]),
                }
                fh.write(json.dumps(rec) + "\n")


def load_task(path: str | Path) -> FewShotTask:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    recs: dict[str, list[dict]] = {"train": [], "dev": [], "test": []}
    for line in lines[1:]:
        if line.strip():
            rec = json.loads(line)
            recs[rec["split"]].append(rec)

    def build(rs):
        ids, mask = _pad([r["input_ids"] for r in rs])
        return Split(ids, mask, np.array([r["mask_pos"] for r in rs]), np.array([r["label"] for r in rs]))

    return FewShotTask(header["name"], build(recs["train"]), build(recs["dev"]), build(recs["test"]),
                       np.array(header["label_ids"]), header["k"])
