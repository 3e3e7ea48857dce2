"""Frozen random projections from the search subspace to prompt space,
and the clipped hidden-state statistics that size them."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DegenerateStatsError(ValueError):
    """Observed standard deviation is zero; a projection cannot be matched to it."""


KINDS = ("uniform", "normal")


@dataclass(frozen=True)
class LayerStats:
    layer: int
    mu_hat: float
    sigma_hat: float
    clip_rounds: int


def compute_sigma_a(alpha: float, sigma_hat: float, d: int, sigma_z: float) -> float:
    """Std of a normal projection that makes ``A z`` match ``alpha * sigma_hat``.

    For ``A_ik ~ N(0, s^2)`` and ``z_k ~ N(0, sigma_z^2)`` independent, each
    entry of ``A z`` has variance ``d s^2 sigma_z^2``.
    """
    if sigma_hat == 0:
        raise DegenerateStatsError("sigma_hat is zero: constant statistics cannot be matched")
    if not (alpha > 0 and sigma_hat > 0 and d >= 1 and sigma_z > 0):
        raise ValueError(f"arguments must be positive (alpha={alpha}, sigma_hat={sigma_hat}, d={d}, sigma_z={sigma_z})")
    return alpha * sigma_hat / (math.sqrt(d) * sigma_z)


def uniform_bound(d: int) -> float:
    """Half-width of the fan-in He-uniform projection, ``sqrt(6 / d)``."""
    return math.sqrt(6.0 / d)


def observe_stats(vectors, clip_rounds: int = 5, layer: int = 0) -> LayerStats:
    """Mean/std of all scalar entries after iterative 3-sigma clipping.

    Clipping only shapes the statistics; the caller's data is not modified.
    """
    x = np.array(vectors, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise ValueError("need at least 2 scalar entries")
    if clip_rounds < 0:
        raise ValueError("clip_rounds must be non-negative")
    for _ in range(clip_rounds):
        mu, sd = x.mean(), x.std()
        np.clip(x, mu - 3 * sd, mu + 3 * sd, out=x)
    mu, sd = float(x.mean()), float(x.std())
    if sd == 0:
        raise DegenerateStatsError("observed standard deviation is zero")
    return LayerStats(layer, mu, sd, clip_rounds)


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """A ``D x d`` matrix, read-only after creation."""

    matrix: np.ndarray
    kind: str
    param: float
    seed: int

    @property
    def D(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def checksum(self) -> int:
        return zlib.crc32(self.matrix.tobytes())

    def __call__(self, z, p0=None) -> np.ndarray:
        return project(self, z, p0)


def sample_projection(D: int, d: int, kind: str, param: float, seed: int) -> ProjectionMatrix:
    """Entries i.i.d. ``N(0, param^2)`` (normal) or ``U(-param, param)`` (uniform).

    Entries are rounded to float32 so the matrix survives the binary sidecar
    format bit-exactly.
    """
    if D < 1 or d < 1:
        raise ValueError(f"projection dims must be positive, got D={D}, d={d}")
    if not param > 0:
        raise ValueError(f"projection parameter must be positive, got {param}")
    if kind not in KINDS:
        raise ValueError(f"unknown projection kind {kind!r}")
    rng = np.random.default_rng(seed)
    if kind == "normal":
        a = rng.standard_normal((D, d)) * param
    else:
        a = rng.uniform(-param, param, size=(D, d))
    a = a.astype(np.float32).astype(np.float64)
    a.flags.writeable = False
    return ProjectionMatrix(a, kind, float(param), int(seed))


def project(A: ProjectionMatrix, z, p0=None) -> np.ndarray:
    """``A z + p0``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (A.d,):
        raise ValueError(f"z has shape {z.shape}, expected ({A.d},)")
    out = A.matrix @ z
    if p0 is not None:
        p0 = np.asarray(p0, dtype=np.float64).reshape(-1)
        if p0.shape != (A.D,):
            raise ValueError(f"p0 has {p0.size} entries, expected {A.D}")
        out = out + p0
    return out


# sidecar: magic, version, D, d, kind, seed, param, then row-major f32 LE
_SIDE_MAGIC = b"PRJ1"
_SIDE_HEADER = struct.Struct("<4sIIIIId")


def save_projection(A: ProjectionMatrix, path: str | Path) -> None:
    header = _SIDE_HEADER.pack(_SIDE_MAGIC, 1, A.D, A.d, KINDS.index(A.kind), A.seed & 0xFFFFFFFF, A.param)
    Path(path).write_bytes(header + A.matrix.astype("<f4").tobytes())


def load_projection(path: str | Path) -> ProjectionMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _SIDE_HEADER.size:
        raise ValueError("truncated projection file")
    magic, version, D, d, kind, seed, param = _SIDE_HEADER.unpack_from(raw)
    if magic != _SIDE_MAGIC or version != 1:
        raise ValueError("not a projection sidecar file")
    body = raw[_SIDE_HEADER.size :]
    if len(body) != 4 * D * d:
        raise ValueError(f"projection payload has {len(body)} bytes, expected {4 * D * d}")
    a = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(D, d)
    a.flags.writeable = False
    return ProjectionMatrix(a, KINDS[kind], param, seed)
