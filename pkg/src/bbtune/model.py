"""A frozen toy residual transformer standing in for a pre-trained LM.

Every block is pure pre-residual, ``x_{j+1} = x_j + f_j(x_j)``, with no
normalization anywhere, so the additive layerwise decomposition holds exactly
(up to round-off). Parameters are float32-representable so a checkpoint
round-trip is bit-exact while all compute runs in float64.

Vocabulary layout is a pure function of the vocabulary size: a few special
tokens, then ``n_topics`` label words, then ``words_per_topic`` topic words per
topic, then filler tokens. Topic words are embedded near their topic's label
word, which is the "pre-trained knowledge" a prompt can exploit through the
tied output head.
"""
from __future__ import annotations

import functools
import hashlib
import math
import struct
import threading
from collections import OrderedDict
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np

PAD, MASK, SEP, CLS = 0, 1, 2, 3
N_SPECIAL = 4


@dataclass(frozen=True)
class Vocab:
    size: int
    n_topics: int
    words_per_topic: int

    @classmethod
    def for_size(cls, size: int) -> "Vocab":
        words_per_topic = 5
        n_topics = min(16, (size - N_SPECIAL) // (words_per_topic + 2))
        return cls(size, max(n_topics, 0), words_per_topic)

    def label_word(self, topic: int) -> int:
        if not 0 <= topic < self.n_topics:
            raise ValueError(f"topic {topic} out of range (vocabulary has {self.n_topics})")
        return N_SPECIAL + topic

    def topic_words(self, topic: int) -> np.ndarray:
        start = N_SPECIAL + self.n_topics + topic * self.words_per_topic
        return np.arange(start, start + self.words_per_topic)

    @property
    def fillers(self) -> np.ndarray:
        return np.arange(N_SPECIAL + self.n_topics * (1 + self.words_per_topic), self.size)

    def topic_of(self) -> np.ndarray:
        """Topic index per token id, -1 for specials and fillers."""
        out = np.full(self.size, -1)
        for t in range(self.n_topics):
            out[self.label_word(t)] = t
            out[self.topic_words(t)] = t
        return out


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 128
    hidden: int = 64
    layers: int = 4
    prompt_len: int = 10
    seed: int = 0
    max_len: int = 64
    embed_std: float = 1.0
    topic_strength: float = 0.8
    attn_temp: float = 1.0
    dtype: str = "float64"
    ffn_mult: int = 2

    @property
    def attn_dim(self) -> int:
        return max(1, self.hidden // 4)

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.hidden


@dataclass(frozen=True)
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wvo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    FIELDS = ("wq", "wk", "wvo", "w1", "b1", "w2", "b2")

    @functools.cached_property
    def wqkv(self) -> np.ndarray:
        return np.ascontiguousarray(np.concatenate([self.wq, self.wk, self.wvo], axis=1))


def _f32(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float32).astype(np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ToyModel:
    config: ModelConfig
    embedding: np.ndarray  # (V, H)
    position: np.ndarray  # (max_len, H)
    layer_params: tuple[LayerParams, ...]
    head_bias: np.ndarray  # (V,)
    vocab: Vocab = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "vocab", Vocab.for_size(self.config.vocab_size))

    @property
    def n_layers(self) -> int:
        return self.config.layers

    @property
    def hidden(self) -> int:
        return self.config.hidden

    @property
    def prompt_len(self) -> int:
        return self.config.prompt_len

    def param_arrays(self):
        """All parameter arrays in checkpoint order."""
        yield self.embedding
        yield self.position
        for lp in self.layer_params:
            for name in LayerParams.FIELDS:
                yield getattr(lp, name)
        yield self.head_bias

    def params(self, dtype) -> tuple[LayerParams, ...]:
        """Layer parameters cast to the compute dtype (cached)."""
        dtype = np.dtype(dtype)
        if dtype == np.float64:
            return self.layer_params
        cache = self.__dict__.setdefault("_cast", {})
        if dtype not in cache:
            cache[dtype] = tuple(
                LayerParams(*(getattr(lp, f).astype(dtype) for f in LayerParams.FIELDS)) for lp in self.layer_params
            )
        return cache[dtype]

    def checksum(self) -> int:
        import zlib

        crc = 0
        for a in self.param_arrays():
            crc = zlib.crc32(np.ascontiguousarray(a).tobytes(), crc)
        return crc


def build_model(config: ModelConfig | None = None, **overrides) -> ToyModel:
    """Seeded random construction; the result is immutable."""
    if config is None:
        config = ModelConfig(**overrides)
    elif overrides:
        config = ModelConfig(**{**config.__dict__, **overrides})
    c = config
    if min(c.vocab_size, c.hidden, c.layers, c.prompt_len) < 1:
        raise ValueError(f"invalid model config {c}")
    if not c.embed_std > 0:
        raise ValueError("embed_std must be positive")
    if c.max_len <= c.prompt_len:
        raise ValueError("max_len must exceed prompt_len")
    rng = np.random.default_rng(c.seed)
    H, a, F = c.hidden, c.attn_dim, c.ffn_dim
    vocab = Vocab.for_size(c.vocab_size)

    emb = rng.standard_normal((c.vocab_size, H))
    centers = rng.standard_normal((max(vocab.n_topics, 1), H))
    topic = vocab.topic_of()
    rho = c.topic_strength
    has_topic = topic >= 0
    emb[has_topic] = rho * centers[topic[has_topic]] + math.sqrt(1 - rho**2) * emb[has_topic]
    for t in range(vocab.n_topics):
        emb[vocab.label_word(t)] = centers[t]
    emb *= c.embed_std
    pos = 0.1 * c.embed_std * rng.standard_normal((c.max_len, H))

    layers = []
    for _ in range(c.layers):
        wq = rng.standard_normal((H, a)) / math.sqrt(H) / c.embed_std
        wk = rng.standard_normal((H, a)) / math.sqrt(H) / c.embed_std * c.attn_temp
        wvo = 0.5 * np.eye(H) + 0.5 * rng.standard_normal((H, H)) / math.sqrt(H)
        w1 = rng.standard_normal((H, F)) / math.sqrt(H) / c.embed_std
        b1 = 0.1 * rng.standard_normal(F)
        w2 = 0.5 * c.embed_std * rng.standard_normal((F, H)) / math.sqrt(F)
        b2 = 0.05 * c.embed_std * rng.standard_normal(H)
        layers.append(LayerParams(*(_f32(w) for w in (wq, wk, wvo, w1, b1, w2, b2))))
    head_bias = 0.5 * rng.standard_normal(c.vocab_size)
    return ToyModel(c, _f32(emb), _f32(pos), tuple(layers), _f32(head_bias))


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    """In-place softmax over the last axis of a ``(B, Q, T)`` array.

    The max and sum are taken through a transposed copy and a matmul with
    ones; both are far faster than a reduction over a short last axis.
    """
    s -= np.ascontiguousarray(np.moveaxis(s, -1, 0)).max(axis=0)[..., None]
    np.exp(s, out=s)
    s /= np.matmul(s, np.ones((s.shape[-1], 1), dtype=s.dtype))
    return s


def block(lp: LayerParams, x: np.ndarray, key_bias: np.ndarray | None = None) -> np.ndarray:
    """Residual branch ``f_j``: single-head attention plus a ReLU feed-forward net.

    ``x`` is ``(B, T, H)``; ``key_bias`` is ``(B, T)`` additive attention bias
    (``-inf`` on padded keys). Returns ``f_j(x)``, not ``x + f_j(x)``.
    """
    B, T, H = x.shape
    a = lp.wq.shape[1]
    flat = x.reshape(B * T, H)
    qkv = flat @ lp.wqkv
    q = qkv[:, :a].reshape(B, T, a)
    k = qkv[:, a : 2 * a].reshape(B, T, a)
    v = qkv[:, 2 * a :].reshape(B, T, H)
    s = np.matmul(q, k.transpose(0, 2, 1))
    s *= 1.0 / math.sqrt(a)
    if key_bias is not None:
        s += key_bias[:, None, :]
    _softmax_rows(s)
    out = np.matmul(s, v).reshape(B * T, H)
    u = (flat + out) @ lp.w1
    u += lp.b1
    np.maximum(u, 0.0, out=u)
    out += u @ lp.w2
    out += lp.b2
    return out.reshape(B, T, H)


@dataclass(frozen=True, eq=False)
class DeepPrompt:
    """Prompt hidden states injected at the prompt positions.

    ``init`` holds the initial embeddings ``p_j^0`` for every layer,
    shape ``(L, n_p, H)``. ``offsets`` holds the tunable part for the first
    ``depth`` layers, shape ``(depth, n_p, H)``; ``depth == 1`` is a shallow
    (input-layer only) prompt, ``depth == L`` a deep prompt. Above ``depth`` the
    prompt positions evolve through the blocks like any other token.
    """

    init: np.ndarray
    offsets: np.ndarray
    token_ids: np.ndarray | None = None

    @property
    def depth(self) -> int:
        return self.offsets.shape[0]

    @property
    def n_layers(self) -> int:
        return self.init.shape[0]

    def layer(self, j: int) -> np.ndarray:
        return self.init[j] + self.offsets[j]

    def with_offsets(self, offsets) -> "DeepPrompt":
        offsets = np.asarray(offsets, dtype=float)
        if offsets.ndim != 3 or offsets.shape[1:] != self.init.shape[1:] or not 1 <= offsets.shape[0] <= self.n_layers:
            raise ValueError(f"offsets shape {offsets.shape} incompatible with init {self.init.shape}")
        return DeepPrompt(self.init, offsets, self.token_ids)

    def zeroed(self, depth: int | None = None) -> "DeepPrompt":
        depth = self.n_layers if depth is None else depth
        return DeepPrompt(self.init, np.zeros((depth, *self.init.shape[1:])), self.token_ids)


def _check_prompt(model: ToyModel, prompt: DeepPrompt) -> None:
    want = (model.n_layers, model.prompt_len, model.hidden)
    if prompt.init.shape != want:
        raise ValueError(f"prompt init shape {prompt.init.shape} does not match model {want}")
    if prompt.offsets.shape[1:] != want[1:] or not 1 <= prompt.depth <= model.n_layers:
        raise ValueError(f"prompt offsets shape {prompt.offsets.shape} does not match model {want}")


def embed(model: ToyModel, input_ids: np.ndarray, offset: int = 0) -> np.ndarray:
    ids = np.asarray(input_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        bad = ids[(ids < 0) | (ids >= model.config.vocab_size)][0]
        raise ValueError(f"unknown token id {int(bad)}")
    T = ids.shape[-1]
    if offset + T > model.config.max_len:
        raise ValueError(f"sequence of length {T} (+{offset} prompt slots) exceeds max_len {model.config.max_len}")
    return model.embedding[ids] + model.position[offset : offset + T]


def _key_bias(mask: np.ndarray, n_p: int) -> np.ndarray | None:
    if mask.all():
        return None
    bias = np.where(mask, 0.0, -np.inf)
    if n_p:
        bias = np.concatenate([np.zeros((mask.shape[0], n_p)), bias], axis=1)
    return bias


def _prepare(model: ToyModel, prompt, input_ids, attention_mask):
    ids = np.atleast_2d(np.asarray(input_ids))
    B, T = ids.shape
    mask = np.ones((B, T), dtype=bool) if attention_mask is None else np.asarray(attention_mask, dtype=bool)
    if mask.shape != (B, T):
        raise ValueError(f"attention_mask shape {mask.shape} != input_ids shape {(B, T)}")
    n_p = 0
    if prompt is not None:
        _check_prompt(model, prompt)
        n_p = model.prompt_len
    x = embed(model, ids, offset=n_p)
    if n_p:
        x = np.concatenate([np.broadcast_to(model.position[:n_p], (B, n_p, model.hidden)), x], axis=1)
    return ids, mask, x, _key_bias(mask, n_p)


def run_layers(model: ToyModel, prompt: DeepPrompt | None, input_ids, attention_mask=None, dtype=None):
    """Run the full stack; return the layer inputs ``[x_1, ..., x_L]`` and the output.

    Hidden states carry the ``n_p`` prompt positions first when ``prompt`` is
    given. Each ``x_j`` is what block ``j`` actually sees, i.e. after prompt
    replacement.
    """
    dtype = np.dtype(dtype or model.config.dtype)
    _, _, x, key_bias = _prepare(model, prompt, input_ids, attention_mask)
    x = x.astype(dtype)
    if key_bias is not None:
        key_bias = key_bias.astype(dtype)
    inputs = []
    for j, lp in enumerate(model.params(dtype)):
        if prompt is not None and j < prompt.depth:
            x = x.copy()
            x[:, : model.prompt_len] = prompt.layer(j)
        inputs.append(x)
        x = x + block(lp, x, key_bias)
    return inputs, x


def _block_at(lp: LayerParams, x: np.ndarray, key_bias: np.ndarray | None, rows: np.ndarray) -> np.ndarray:
    """``f_j(x)`` evaluated only at one query position per example, ``(B, H)``."""
    B, T, H = x.shape
    a = lp.wq.shape[1]
    xq = x[np.arange(B), rows]
    kv = x.reshape(B * T, H) @ lp.wqkv[:, a:]
    k = kv[:, :a].reshape(B, T, a)
    v = kv[:, a:].reshape(B, T, H)
    q = xq @ lp.wq
    s = np.matmul(q[:, None, :], k.transpose(0, 2, 1))
    s *= 1.0 / math.sqrt(a)
    if key_bias is not None:
        s += key_bias[:, None, :]
    _softmax_rows(s)
    out = np.matmul(s, v)[:, 0]
    u = (xq + out) @ lp.w1
    u += lp.b1
    np.maximum(u, 0.0, out=u)
    out += u @ lp.w2
    out += lp.b2
    return out


class PrefixCache:
    """LRU cache of hidden states entering a layer, keyed by everything that
    determines them: the batch, the initial prompt, and the prompt offsets of
    the layers below. Hits reproduce the uncached computation bit for bit."""

    def __init__(self, capacity: int = 32):
        self.capacity = capacity
        self._store: OrderedDict[bytes, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: bytes):
        with self._lock:
            x = self._store.get(key)
            if x is None:
                self.misses += 1
                return None
            self._store.move_to_end(key)
            self.hits += 1
            return x

    def put(self, key: bytes, x: np.ndarray) -> None:
        x.flags.writeable = False
        with self._lock:
            self._store[key] = x
            self._store.move_to_end(key)
            while len(self._store) > self.capacity:
                self._store.popitem(last=False)


def _prefix_key(base: bytes, prompt: DeepPrompt, j: int) -> bytes:
    h = hashlib.blake2b(base, digest_size=16)
    h.update(np.ascontiguousarray(prompt.offsets[:j]).tobytes())
    h.update(j.to_bytes(4, "little"))
    return h.digest()


def forward(model: ToyModel, prompt: DeepPrompt | None, input_ids, mask_pos, label_ids, attention_mask=None,
            *, use_prompt=True, cache: PrefixCache | None = None, dtype=None):
    """Label-word logits at each example's mask position, shape ``(B, C)``.

    ``prompt=None`` uses the model's default initial deep prompt with zero
    offsets; ``use_prompt=False`` runs without prompt positions at all.
    ``mask_pos`` indexes into ``input_ids`` (prompt slots excluded).
    """
    dtype = np.dtype(dtype or model.config.dtype)
    if prompt is None and use_prompt:
        prompt = default_prompt(model)
    if not use_prompt:
        prompt = None
    ids, mask, x0, key_bias = _prepare(model, prompt, input_ids, attention_mask)
    mask_pos = np.asarray(mask_pos).reshape(-1)
    if mask_pos.shape[0] != ids.shape[0]:
        raise ValueError("one mask position per example required")
    if mask_pos.size and (mask_pos.min() < 0 or mask_pos.max() >= ids.shape[1]):
        raise ValueError("mask position out of range")
    n_p = 0 if prompt is None else model.prompt_len
    params = model.params(dtype)
    L = len(params)
    if key_bias is not None:
        key_bias = key_bias.astype(dtype)

    start, x = 0, None
    base = b""
    if cache is not None and prompt is not None and prompt.depth > 1:
        h = hashlib.blake2b(digest_size=16)
        for part in (dtype.str.encode(), ids.tobytes(), mask.tobytes(), prompt.init.tobytes(),
                     prompt.depth.to_bytes(4, "little")):
            h.update(part)
        base = h.digest()
        for j in range(prompt.depth - 1, 0, -1):
            hit = cache.get(_prefix_key(base, prompt, j))
            if hit is not None:
                start, x = j, hit
                break
    if x is None:
        x = x0.astype(dtype)
    for j in range(start, L):
        if prompt is not None and j < prompt.depth:
            if base and j > start:
                cache.put(_prefix_key(base, prompt, j), x)
            x = x.copy()
            x[:, :n_p] = prompt.layer(j)
        if j < L - 1:
            x = x + block(params[j], x, key_bias)
    rows = n_p + mask_pos
    h = x[np.arange(ids.shape[0]), rows] + _block_at(params[-1], x, key_bias, rows)
    return head_logits(model, h.astype(np.float64), label_ids)


def head_logits(model: ToyModel, h: np.ndarray, label_ids) -> np.ndarray:
    """Tied output head restricted to the label words: ``h E^T / sqrt(H) + b``."""
    label_ids = np.asarray(label_ids)
    w = model.embedding[label_ids] / model.config.embed_std
    return h @ w.T / math.sqrt(model.hidden) + model.head_bias[label_ids]


def capture_initial_deep_prompt(model: ToyModel, seed: int = 0) -> DeepPrompt:
    """Sample ``n_p`` vocabulary embeddings as ``p_1^0`` and record ``p_j^0``.

    The recording pass runs the prompt tokens alone, so ``p_j^0`` does not
    depend on any task input.
    """
    rng = np.random.default_rng(seed)
    lo = N_SPECIAL if model.config.vocab_size > N_SPECIAL else 0
    ids = rng.integers(lo, model.config.vocab_size, size=model.prompt_len)
    x = model.embedding[ids][None, :, :].copy()
    init = [x[0].copy()]
    for lp in model.layer_params[:-1]:
        x = x + block(lp, x)
        init.append(x[0].copy())
    init = np.stack(init)
    init.flags.writeable = False
    return DeepPrompt(init, np.zeros_like(init), ids)


@functools.lru_cache(maxsize=64)
def default_prompt(model: ToyModel) -> DeepPrompt:
    """Initial deep prompt drawn with the model's own seed."""
    return capture_initial_deep_prompt(model, model.config.seed)


def decomposition_check(model: ToyModel, input_ids, prompt: DeepPrompt | None = None, attention_mask=None) -> float:
    """Max-abs gap between the stack output and ``x_1 + sum_j f_j(x_j)``, in float64.

    With a prompt, replacement is not residual at the prompt positions, so the
    identity is checked on the remaining positions only, with each block fed
    the prompt-injected input it actually saw.
    """
    inputs, out = run_layers(model, prompt, input_ids, attention_mask, dtype=np.float64)
    ids = np.atleast_2d(np.asarray(input_ids))
    mask = np.ones(ids.shape, bool) if attention_mask is None else np.asarray(attention_mask, bool)
    n_p = 0 if prompt is None else model.prompt_len
    key_bias = _key_bias(mask, n_p)
    total = inputs[0].copy()
    for lp, x in zip(model.layer_params, inputs):
        total += block(lp, x, key_bias)
    return float(np.max(np.abs(out[:, n_p:] - total[:, n_p:])))


def layer_hidden_stats(model: ToyModel, input_ids, attention_mask=None, prompt: DeepPrompt | None = None,
                       clip_rounds: int = 5) -> list:
    """Clipped statistics per layer, ``L + 1`` entries.

    Index 0 is the word-embedding table; index ``j`` (``1 <= j < L``) pools
    the hidden states entering block ``j``; index ``L`` pools the final
    output. Hidden states come from one pass over the batch with the initial
    deep prompt attached, and pool every non-padding position. ``input_ids``
    may also be a task, whose train split is used.
    """
    from .projection import observe_stats

    if hasattr(input_ids, "train"):
        input_ids, attention_mask = input_ids.train.input_ids, input_ids.train.attention_mask
    ids = np.atleast_2d(np.asarray(input_ids))
    if ids.size == 0:
        raise ValueError("empty batch")
    if prompt is None:
        prompt = default_prompt(model)
    mask = np.ones(ids.shape, bool) if attention_mask is None else np.asarray(attention_mask, bool)
    inputs, out = run_layers(model, prompt, ids, mask, dtype=np.float64)
    keep = np.concatenate([np.ones((ids.shape[0], model.prompt_len), bool), mask], axis=1)
    stats = [observe_stats(model.embedding, clip_rounds, layer=0)]
    for j, x in enumerate(inputs[1:] + [out], start=1):
        stats.append(observe_stats(x[keep], clip_rounds, layer=j))
    return stats


COMPACT = ModelConfig(hidden=16, prompt_len=4, ffn_mult=1, dtype="float32")
"""Small float32 preset sized for budget-scale runs on a single CPU core."""

# checkpoint: header then every parameter array as row-major f32 LE
_CKPT_MAGIC = b"TOYM"
_CKPT_HEADER = struct.Struct("<4sIIIIIIIIdddI")
_DTYPES = ("float64", "float32")


def save_model(model: ToyModel, path) -> None:
    c = model.config
    header = _CKPT_HEADER.pack(_CKPT_MAGIC, 1, c.vocab_size, c.hidden, c.layers, c.prompt_len, c.seed & 0xFFFFFFFF,
                               c.max_len, c.ffn_mult, c.embed_std, c.topic_strength, c.attn_temp,
                               _DTYPES.index(c.dtype))
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in model.param_arrays())
    Path(path).write_bytes(header + body)


def load_model(path) -> ToyModel:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError("truncated checkpoint")
    (magic, version, V, H, L, n_p, seed, max_len, ffn_mult, embed_std, topic_strength, attn_temp,
     dtype) = _CKPT_HEADER.unpack_from(raw)
    if magic != _CKPT_MAGIC or version != 1:
        raise ValueError("not a toy-model checkpoint")
    config = ModelConfig(V, H, L, n_p, seed, max_len, embed_std, topic_strength, attn_temp, _DTYPES[dtype], ffn_mult)
    a, F = config.attn_dim, config.ffn_dim
    shapes = [(V, H), (max_len, H)]
    shapes += [(H, a), (H, a), (H, H), (H, F), (F,), (F, H), (H,)] * L
    shapes.append((V,))
    need = 4 * sum(math.prod(s) for s in shapes)
    if len(raw) - _CKPT_HEADER.size != need:
        raise ValueError(f"checkpoint payload has {len(raw) - _CKPT_HEADER.size} bytes, expected {need}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_CKPT_HEADER.size)
    arrays, pos = [], 0
    for s in shapes:
        n = math.prod(s)
        arrays.append(_f32(flat[pos : pos + n].reshape(s)))
        pos += n
    emb, position, rest = arrays[0], arrays[1], arrays[2:]
    layers = tuple(LayerParams(*rest[7 * j : 7 * j + 7]) for j in range(L))
    return ToyModel(config, emb, position, layers, rest[-1])
