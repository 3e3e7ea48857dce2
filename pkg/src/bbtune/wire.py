"""Binary wire format between an optimizer client and the inference service.

Every frame is a 4-byte little-endian length followed by a message. Every
message starts with ``b"BBT"``, a version byte, a u32 message type and a u32
request id. All integers and floats are little-endian. Layouts::

    INFER_REQ   header   batch, seqlen, prompt_kind, layers, n_p, width,
                         n_labels, prompt_seed                 (8 x u32)
                payload  input_ids      batch*seqlen x u16
                         attention_mask batch*seqlen x u8
                         mask_pos       batch x u16
                         label_ids      n_labels x u16
                         projections    layers x (u32 kind, u32 seed, f64 param)
                                        (subspace kinds only)
                         prompt         layers*n_p*width x f32
    INFER_RESP  header   batch, n_labels (2 x u32); payload logits batch*n_labels x f32
    STATS_REQ   header   batch, seqlen, prompt_seed, clip_rounds (4 x u32)
                payload  input_ids, attention_mask as above
    STATS_RESP  header   count (u32); payload count x (u32 layer, u32 clip_rounds, f64 mu, f64 sigma)
    INFO_REQ    no body
    INFO_RESP   vocab, hidden, layers, prompt_len, max_len (5 x u32)
    ERROR       code (u32), message length (u32), utf-8 message

For subspace prompt kinds the client uploads ``z`` (``n_p = 1``,
``width = d``) plus the generating parameters of each projection; the
server rebuilds the projections. Otherwise ``width`` is the hidden size and
the prompt payload holds the offsets added to the initial prompt.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"BBT"
VERSION = 1
FRAME = struct.Struct("<I")
PREAMBLE = struct.Struct("<3sBII")  # magic, version, msg type, request id
INFER_HEADER = struct.Struct("<8I")
RESP_HEADER = struct.Struct("<2I")
STATS_HEADER = struct.Struct("<4I")
STATS_ENTRY = struct.Struct("<IIdd")
INFO_BODY = struct.Struct("<5I")
ERROR_HEADER = struct.Struct("<II")
PROJ_DESC = struct.Struct("<IId")

REQUEST_HEADER_BYTES = PREAMBLE.size + INFER_HEADER.size  # 44
RESPONSE_HEADER_BYTES = PREAMBLE.size + RESP_HEADER.size  # 20
U16_MAX = 0xFFFF
U32_MAX = 0xFFFFFFFF


class MsgType(enum.IntEnum):
    INFER_REQ = 1
    INFER_RESP = 2
    STATS_REQ = 3
    STATS_RESP = 4
    ERROR = 5
    INFO_REQ = 6
    INFO_RESP = 7


class PromptKind(enum.IntEnum):
    NONE = 0
    SHALLOW = 1
    DEEP = 2
    SHALLOW_SUBSPACE = 3
    DEEP_SUBSPACE = 4

    @property
    def subspace(self) -> bool:
        return self in (PromptKind.SHALLOW_SUBSPACE, PromptKind.DEEP_SUBSPACE)


PROJ_KINDS = ("uniform", "normal")


class ProtocolError(ValueError):
    """A message could not be decoded."""


class TruncatedError(ProtocolError):
    pass


class BadMagicError(ProtocolError):
    pass


class VersionError(ProtocolError):
    pass


class EncodeError(ValueError):
    """A request holds values the wire format cannot represent."""


@dataclass(frozen=True)
class ProjectionSpec:
    """Enough to regenerate one projection matrix server-side."""

    kind: str
    seed: int
    param: float


@dataclass(eq=False)
class InferenceRequest:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    mask_pos: np.ndarray
    label_ids: np.ndarray
    prompt_kind: PromptKind = PromptKind.NONE
    prompt: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0), np.float32))
    projections: tuple = ()
    prompt_seed: int = 0
    request_id: int = 0

    def __post_init__(self):
        self.input_ids = np.atleast_2d(np.asarray(self.input_ids))
        self.attention_mask = np.asarray(self.attention_mask, dtype=bool).reshape(self.input_ids.shape)
        self.mask_pos = np.asarray(self.mask_pos).reshape(-1)
        self.label_ids = np.asarray(self.label_ids).reshape(-1)
        self.prompt_kind = PromptKind(self.prompt_kind)
        p = np.asarray(self.prompt, dtype=np.float32)
        if p.size == 0:
            p = p.reshape(0, 0, 0)
        elif p.ndim != 3:
            raise ValueError(f"prompt must be (layers, n_p, width), got shape {p.shape}")
        self.prompt = p
        self.projections = tuple(self.projections)

    @property
    def batch(self) -> int:
        return self.input_ids.shape[0]

    @property
    def seqlen(self) -> int:
        return self.input_ids.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, InferenceRequest):
            return NotImplemented
        arrays = ("input_ids", "attention_mask", "mask_pos", "label_ids", "prompt")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.prompt.shape == other.prompt.shape
            and (self.prompt_kind, self.projections, self.prompt_seed, self.request_id)
            == (other.prompt_kind, other.projections, other.prompt_seed, other.request_id)
        )


@dataclass(eq=False)
class InferenceResponse:
    logits: np.ndarray  # (batch, n_labels) float32
    request_id: int = 0


@dataclass(frozen=True)
class RequestSizes:
    """Byte breakdown of one encoded request.

    ``overhead`` is everything that is not ids, mask or prompt: the frame
    prefix, fixed header, mask positions, verbalizer ids and projection
    descriptors.
    """

    frame: int
    header: int
    ids: int
    mask: int
    mask_pos: int
    labels: int
    projections: int
    prompt: int

    @property
    def overhead(self) -> int:
        return self.frame + self.header + self.mask_pos + self.labels + self.projections

    @property
    def total(self) -> int:
        return self.overhead + self.ids + self.mask + self.prompt


def request_sizes(batch: int, seqlen: int, n_labels: int, prompt_values: int = 0, layers: int = 0,
                  subspace: bool = False) -> RequestSizes:
    """Closed-form size of an inference request; matches ``len(frame(encode_request(...)))``."""
    return RequestSizes(
        frame=FRAME.size,
        header=REQUEST_HEADER_BYTES,
        ids=2 * batch * seqlen,
        mask=batch * seqlen,
        mask_pos=2 * batch,
        labels=2 * n_labels,
        projections=PROJ_DESC.size * layers if subspace else 0,
        prompt=4 * prompt_values,
    )


def sizes_of(req: InferenceRequest) -> RequestSizes:
    return request_sizes(req.batch, req.seqlen, len(req.label_ids), req.prompt.size, req.prompt.shape[0],
                         req.prompt_kind.subspace)


def response_size(batch: int, n_labels: int) -> int:
    """Frame prefix + header + ``batch * n_labels`` f32 logits."""
    return FRAME.size + RESPONSE_HEADER_BYTES + 4 * batch * n_labels


def frame(message: bytes) -> bytes:
    return FRAME.pack(len(message)) + message


def _u16(name: str, a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.size and (a.min() < 0 or a.max() > U16_MAX):
        raise EncodeError(f"{name} must fit in an unsigned 16-bit integer")
    return a.astype("<u2").tobytes()


def _u32(name: str, v: int) -> int:
    if not 0 <= v <= U32_MAX:
        raise EncodeError(f"{name}={v} overflows an unsigned 32-bit field")
    return int(v)


def _preamble(msg_type: MsgType, request_id: int) -> bytes:
    return PREAMBLE.pack(MAGIC, VERSION, msg_type, _u32("request_id", request_id))


def encode_request(req: InferenceRequest) -> bytes:
    layers, n_p, width = req.prompt.shape
    if req.prompt_kind == PromptKind.NONE and req.prompt.size:
        raise EncodeError("prompt values given with prompt kind NONE")
    if req.prompt_kind.subspace and len(req.projections) != layers:
        raise EncodeError(f"{layers} prompt layers but {len(req.projections)} projection descriptors")
    if not req.prompt_kind.subspace and req.projections:
        raise EncodeError("projection descriptors are only sent with subspace prompt kinds")
    head = INFER_HEADER.pack(*(_u32(n, v) for n, v in (
        ("batch", req.batch), ("seqlen", req.seqlen), ("prompt_kind", req.prompt_kind), ("layers", layers),
        ("n_p", n_p), ("width", width), ("n_labels", len(req.label_ids)), ("prompt_seed", req.prompt_seed))))
    parts = [
        _preamble(MsgType.INFER_REQ, req.request_id),
        head,
        _u16("token id", req.input_ids),
        req.attention_mask.astype("u1").tobytes(),
        _u16("mask position", req.mask_pos),
        _u16("label id", req.label_ids),
    ]
    for spec in req.projections:
        parts.append(PROJ_DESC.pack(PROJ_KINDS.index(spec.kind), _u32("projection seed", spec.seed), spec.param))
    parts.append(req.prompt.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise ProtocolError(f"{len(self.buf) - self.pos} trailing bytes")


def read_preamble(buf: bytes) -> tuple[MsgType, int, _Reader]:
    r = _Reader(buf)
    if len(buf) >= 3 and bytes(buf[:3]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:3])!r}")
    magic, version, msg_type, request_id = r.unpack(PREAMBLE)
    if version != VERSION:
        raise VersionError(f"protocol version {version}, expected {VERSION}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}") from None
    return msg_type, request_id, r


def _expect(buf: bytes, want: MsgType) -> tuple[int, _Reader]:
    msg_type, request_id, r = read_preamble(buf)
    if msg_type == MsgType.ERROR and want != MsgType.ERROR:
        code, message = _error_body(r)
        raise RemoteError(code, message, request_id)
    if msg_type != want:
        raise ProtocolError(f"expected {want.name}, got {msg_type.name}")
    return request_id, r


def decode_request(buf: bytes) -> InferenceRequest:
    request_id, r = _expect(buf, MsgType.INFER_REQ)
    batch, seqlen, kind, layers, n_p, width, n_labels, prompt_seed = r.unpack(INFER_HEADER)
    try:
        kind = PromptKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown prompt kind {kind}") from None
    ids = r.array("<u2", batch * seqlen).reshape(batch, seqlen).astype(np.int64)
    mask = r.array("u1", batch * seqlen).reshape(batch, seqlen).astype(bool)
    mask_pos = r.array("<u2", batch).astype(np.int64)
    label_ids = r.array("<u2", n_labels).astype(np.int64)
    projections = []
    if kind.subspace:
        for _ in range(layers):
            k, seed, param = r.unpack(PROJ_DESC)
            if k >= len(PROJ_KINDS):
                raise ProtocolError(f"unknown projection kind {k}")
            projections.append(ProjectionSpec(PROJ_KINDS[k], seed, param))
    prompt = r.array("<f4", layers * n_p * width).reshape(layers, n_p, width).astype(np.float32)
    r.done()
    return InferenceRequest(ids, mask, mask_pos, label_ids, kind, prompt, tuple(projections), prompt_seed, request_id)


def encode_response(resp: InferenceResponse) -> bytes:
    logits = np.atleast_2d(np.asarray(resp.logits))
    return (_preamble(MsgType.INFER_RESP, resp.request_id) + RESP_HEADER.pack(*logits.shape)
            + logits.astype("<f4").tobytes())


def decode_response(buf: bytes) -> InferenceResponse:
    request_id, r = _expect(buf, MsgType.INFER_RESP)
    batch, n_labels = r.unpack(RESP_HEADER)
    logits = r.array("<f4", batch * n_labels).reshape(batch, n_labels).astype(np.float32)
    r.done()
    return InferenceResponse(logits, request_id)


class RemoteError(RuntimeError):
    """The server answered with an error frame."""

    def __init__(self, code: int, message: str, request_id: int = 0):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message
        self.request_id = request_id


ERR_PROTOCOL = 1
ERR_INVALID = 2
ERR_INTERNAL = 3


def encode_error(code: int, message: str, request_id: int = 0) -> bytes:
    text = message.encode("utf-8")
    return _preamble(MsgType.ERROR, request_id) + ERROR_HEADER.pack(code, len(text)) + text


def _error_body(r: _Reader) -> tuple[int, str]:
    code, n = r.unpack(ERROR_HEADER)
    return code, bytes(r.take(n)).decode("utf-8", "replace")


def decode_error(buf: bytes) -> RemoteError:
    request_id, r = _expect(buf, MsgType.ERROR)
    code, message = _error_body(r)
    return RemoteError(code, message, request_id)


def encode_stats_request(input_ids, attention_mask, prompt_seed: int, clip_rounds: int = 5,
                         request_id: int = 0) -> bytes:
    ids = np.atleast_2d(np.asarray(input_ids))
    mask = np.asarray(attention_mask, dtype=bool).reshape(ids.shape)
    return (_preamble(MsgType.STATS_REQ, request_id)
            + STATS_HEADER.pack(*ids.shape, _u32("prompt_seed", prompt_seed), _u32("clip_rounds", clip_rounds))
            + _u16("token id", ids) + mask.astype("u1").tobytes())


def decode_stats_request(buf: bytes):
    request_id, r = _expect(buf, MsgType.STATS_REQ)
    batch, seqlen, prompt_seed, clip_rounds = r.unpack(STATS_HEADER)
    ids = r.array("<u2", batch * seqlen).reshape(batch, seqlen).astype(np.int64)
    mask = r.array("u1", batch * seqlen).reshape(batch, seqlen).astype(bool)
    r.done()
    return request_id, ids, mask, prompt_seed, clip_rounds


def encode_stats_response(stats, request_id: int = 0) -> bytes:
    body = b"".join(STATS_ENTRY.pack(s.layer, s.clip_rounds, s.mu_hat, s.sigma_hat) for s in stats)
    return _preamble(MsgType.STATS_RESP, request_id) + FRAME.pack(len(stats)) + body


def decode_stats_response(buf: bytes):
    from .projection import LayerStats

    request_id, r = _expect(buf, MsgType.STATS_RESP)
    (count,) = r.unpack(FRAME)
    out = []
    for _ in range(count):
        layer, rounds, mu, sigma = r.unpack(STATS_ENTRY)
        out.append(LayerStats(layer, mu, sigma, rounds))
    r.done()
    return request_id, out


def encode_info_request(request_id: int = 0) -> bytes:
    return _preamble(MsgType.INFO_REQ, request_id)


def encode_info_response(info: tuple, request_id: int = 0) -> bytes:
    return _preamble(MsgType.INFO_RESP, request_id) + INFO_BODY.pack(*info)


def decode_info_response(buf: bytes):
    request_id, r = _expect(buf, MsgType.INFO_RESP)
    info = r.unpack(INFO_BODY)
    r.done()
    return request_id, info
