"""The model behind an inference API: request handling, traffic accounting,
an in-process endpoint and a framed TCP server/client pair."""
from __future__ import annotations

import functools
import itertools
import logging
import socket
import socketserver
import threading
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import wire
from .model import PrefixCache, ToyModel, capture_initial_deep_prompt, forward, layer_hidden_stats
from .projection import sample_projection
from .wire import InferenceRequest, PromptKind

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelInfo:
    vocab_size: int
    hidden: int
    layers: int
    prompt_len: int
    max_len: int


def model_info(model: ToyModel) -> ModelInfo:
    c = model.config
    return ModelInfo(c.vocab_size, c.hidden, c.layers, c.prompt_len, c.max_len)


@functools.lru_cache(maxsize=64)
def _initial_prompt(model: ToyModel, seed: int):
    return capture_initial_deep_prompt(model, seed)


@functools.lru_cache(maxsize=256)
def _projection(D: int, d: int, spec: wire.ProjectionSpec):
    return sample_projection(D, d, spec.kind, spec.param, spec.seed)


def request_offsets(model: ToyModel, req: InferenceRequest) -> np.ndarray:
    """The prompt offsets a request asks for, shape ``(layers, n_p, H)``."""
    n_p, H, L = model.prompt_len, model.hidden, model.n_layers
    layers = req.prompt.shape[0]
    kind = req.prompt_kind
    want_layers = 1 if kind in (PromptKind.SHALLOW, PromptKind.SHALLOW_SUBSPACE) else L
    if layers != want_layers:
        raise ValueError(f"{kind.name} prompt needs {want_layers} layers, got {layers}")
    if not kind.subspace:
        if req.prompt.shape[1:] != (n_p, H):
            raise ValueError(f"prompt layers have shape {req.prompt.shape[1:]}, model expects {(n_p, H)}")
        return req.prompt
    if req.prompt.shape[1] != 1:
        raise ValueError("subspace prompts carry one z vector per layer")
    d = req.prompt.shape[2]
    out = np.empty((layers, n_p, H))
    for j, spec in enumerate(req.projections):
        A = _projection(n_p * H, d, spec)
        out[j] = (A.matrix @ req.prompt[j, 0].astype(np.float64)).reshape(n_p, H)
    return out


def handle_request(model: ToyModel, req: InferenceRequest, cache: PrefixCache | None = None) -> np.ndarray:
    """Run one inference request; label-word logits as float32, ``(batch, C)``."""
    if req.label_ids.size == 0:
        raise ValueError("no label words")
    if req.label_ids.min() < 0 or req.label_ids.max() >= model.config.vocab_size:
        raise ValueError("label id outside the vocabulary")
    args = (req.input_ids, req.mask_pos, req.label_ids, req.attention_mask)
    if req.prompt_kind == PromptKind.NONE:
        logits = forward(model, None, *args, use_prompt=False)
    else:
        prompt = _initial_prompt(model, req.prompt_seed).with_offsets(request_offsets(model, req))
        logits = forward(model, prompt, *args, cache=cache)
    return logits.astype(np.float32)


class TrafficLedger:
    """Cumulative bytes up and down plus request count; updates are atomic."""

    def __init__(self):
        self._lock = threading.Lock()
        self.upload = 0
        self.download = 0
        self.requests = 0

    def record(self, up: int, down: int, n: int = 1) -> None:
        with self._lock:
            self.upload += up
            self.download += down
            self.requests += n

    def snapshot(self) -> dict:
        with self._lock:
            return {"upload": self.upload, "download": self.download, "requests": self.requests}


class TransportError(ConnectionError):
    """The remote endpoint could not be reached after all retries."""


class EvalApi:
    """An inference endpoint as the optimizer sees it.

    Every inference request is one metered API call, counted under a
    purpose (``"train"`` or ``"dev"``); nothing but logits comes back.
    """

    def __init__(self):
        self.calls: Counter = Counter()
        self.ledger = TrafficLedger()
        self._count_lock = threading.Lock()

    def _count(self, purpose: str, n: int = 1) -> None:
        with self._count_lock:
            self.calls[purpose] += n

    def evaluate(self, req: InferenceRequest, purpose: str = "train") -> np.ndarray:
        return self.evaluate_many([req], purpose)[0]

    def evaluate_many(self, reqs, purpose: str = "train") -> list:
        raise NotImplementedError

    def layer_stats(self, input_ids, attention_mask, prompt_seed: int, clip_rounds: int = 5) -> list:
        raise NotImplementedError

    def info(self) -> ModelInfo:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcessEvalApi(EvalApi):
    """Calls the model directly. The ledger still records the bytes each
    request would have cost on the wire."""

    def __init__(self, model: ToyModel, cache: bool = True):
        super().__init__()
        self.model = model
        self.cache = PrefixCache() if cache else None

    def evaluate_many(self, reqs, purpose: str = "train") -> list:
        out = []
        for req in reqs:
            logits = handle_request(self.model, req, self.cache)
            self._count(purpose)
            self.ledger.record(wire.sizes_of(req).total, wire.response_size(*logits.shape))
            out.append(logits)
        return out

    def layer_stats(self, input_ids, attention_mask, prompt_seed: int, clip_rounds: int = 5) -> list:
        prompt = _initial_prompt(self.model, prompt_seed)
        return layer_hidden_stats(self.model, input_ids, attention_mask, prompt, clip_rounds)

    def info(self) -> ModelInfo:
        return model_info(self.model)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed by peer")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes | None:
    """One framed message, or ``None`` on a clean close between frames."""
    head = sock.recv(wire.FRAME.size, socket.MSG_WAITALL)
    if not head:
        return None
    if len(head) < wire.FRAME.size:
        head += _recv_exact(sock, wire.FRAME.size - len(head))
    (n,) = wire.FRAME.unpack(head)
    return _recv_exact(sock, n)


def parse_address(address) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address[0], int(address[1])
    host, _, port = str(address).rpartition(":")
    return host or "127.0.0.1", int(port)


class RemoteEvalApi(EvalApi):
    """Evaluates over a framed TCP connection.

    ``evaluate_many`` pipelines its requests: all frames are written before
    the responses are read. A dropped connection is retried ``retries`` times
    with a fresh connection before :class:`TransportError` is raised.
    """

    def __init__(self, address, timeout: float = 30.0, retries: int = 2, backoff: float = 0.05):
        super().__init__()
        self.address = parse_address(address)
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()
        self._ids = itertools.count(1)

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self._sock

    def close(self) -> None:
        with self._lock:
            if self._sock is not None:
                self._sock.close()
                self._sock = None

    def _exchange(self, messages: list[bytes]) -> list[bytes]:
        frames = [wire.frame(m) for m in messages]
        payload = b"".join(frames)
        last = None
        with self._lock:
            for attempt in range(self.retries + 1):
                try:
                    sock = self._connect()
                    sock.sendall(payload)
                    replies = []
                    for _ in frames:
                        reply = read_frame(sock)
                        if reply is None:
                            raise ConnectionError("connection closed by peer")
                        replies.append(reply)
                    self.ledger.record(len(payload), sum(wire.FRAME.size + len(r) for r in replies), len(frames))
                    return replies
                except OSError as e:
                    last = e
                    if self._sock is not None:
                        self._sock.close()
                        self._sock = None
                    log.warning("transport failure (attempt %d/%d): %s", attempt + 1, self.retries + 1, e)
                    time.sleep(self.backoff * (attempt + 1))
        raise TransportError(f"{self.address[0]}:{self.address[1]} unreachable after {self.retries + 1} attempts: {last}")

    def evaluate_many(self, reqs, purpose: str = "train") -> list:
        ids = [next(self._ids) & wire.U32_MAX for _ in reqs]
        messages = []
        for rid, req in zip(ids, reqs):
            req.request_id = rid
            messages.append(wire.encode_request(req))
        out = []
        for rid, reply in zip(ids, self._exchange(messages)):
            resp = wire.decode_response(reply)
            if resp.request_id != rid:
                raise wire.ProtocolError(f"response id {resp.request_id} does not match request {rid}")
            out.append(resp.logits)
        self._count(purpose, len(reqs))
        return out

    def layer_stats(self, input_ids, attention_mask, prompt_seed: int, clip_rounds: int = 5) -> list:
        (reply,) = self._exchange([wire.encode_stats_request(input_ids, attention_mask, prompt_seed, clip_rounds)])
        return wire.decode_stats_response(reply)[1]

    def info(self) -> ModelInfo:
        (reply,) = self._exchange([wire.encode_info_request()])
        return ModelInfo(*wire.decode_info_response(reply)[1])


def dispatch(model: ToyModel, message: bytes, cache: PrefixCache | None = None, max_batch: int | None = None) -> bytes:
    """Answer one decoded-or-not message; failures become error messages."""
    request_id = 0
    try:
        msg_type, request_id, _ = wire.read_preamble(message)
        if msg_type == wire.MsgType.INFER_REQ:
            req = wire.decode_request(message)
            if max_batch is not None and req.batch > max_batch:
                raise ValueError(f"batch of {req.batch} exceeds the server limit {max_batch}")
            logits = handle_request(model, req, cache)
            return wire.encode_response(wire.InferenceResponse(logits, request_id))
        if msg_type == wire.MsgType.STATS_REQ:
            _, ids, mask, seed, rounds = wire.decode_stats_request(message)
            stats = layer_hidden_stats(model, ids, mask, _initial_prompt(model, seed), rounds)
            return wire.encode_stats_response(stats, request_id)
        if msg_type == wire.MsgType.INFO_REQ:
            info = model_info(model)
            return wire.encode_info_response(tuple(info.__dict__.values()), request_id)
        raise wire.ProtocolError(f"unexpected message type {msg_type.name}")
    except wire.ProtocolError as e:
        return wire.encode_error(wire.ERR_PROTOCOL, f"{type(e).__name__}: {e}", request_id)
    except ValueError as e:
        return wire.encode_error(wire.ERR_INVALID, str(e), request_id)
    except Exception as e:  # keep serving; the client sees the failure
        log.exception("request %d failed", request_id)
        return wire.encode_error(wire.ERR_INTERNAL, f"{type(e).__name__}: {e}", request_id)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: LmaasServer = self.server  # type: ignore[assignment]
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        server._track(sock, True)
        try:
            while True:
                try:
                    message = read_frame(sock)
                except OSError:
                    return
                if message is None:
                    return
                reply = wire.frame(dispatch(server.model, message, server.cache, server.max_batch))
                server.ledger.record(wire.FRAME.size + len(message), len(reply))
                try:
                    sock.sendall(reply)
                except OSError:
                    return
        finally:
            server._track(sock, False)


class LmaasServer(socketserver.ThreadingTCPServer):
    """Threaded framed-protocol server around one frozen model.

    Requests are independent; the prefix cache is a pure memo and does not
    make the server stateful.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model: ToyModel, address=("127.0.0.1", 0), max_batch: int | None = None):
        super().__init__(parse_address(address), _Handler)
        self.model = model
        self.max_batch = max_batch
        self.cache = PrefixCache(capacity=64)
        self.ledger = TrafficLedger()
        self._conns: set = set()
        self._conns_lock = threading.Lock()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def _track(self, sock, alive: bool) -> None:
        with self._conns_lock:
            (self._conns.add if alive else self._conns.discard)(sock)

    def start(self) -> "LmaasServer":
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        """Stop accepting and drop every open connection."""
        self.shutdown()
        with self._conns_lock:
            for sock in list(self._conns):
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(model: ToyModel, address="127.0.0.1:0", max_batch: int | None = None) -> LmaasServer:
    """Start a server in a background thread and return it."""
    server = LmaasServer(model, address, max_batch).start()
    log.info("serving on %s", server.address)
    return server
