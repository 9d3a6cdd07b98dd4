"""Binary tensor files, scene manifests and a counter-based RNG.

Tensor file layout (little-endian)::

    0..3   magic b"LT3D"
    4      version (1)
    5      dtype (0 = f32, 1 = f64)
    6      ndim (1..4)
    7      zero pad
    8..    ndim x u64 extents, then the row-major payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LT3D"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_MAX_ELEMS = 1 << 40


class TensorFormatError(ValueError):
    pass


def write_tensor(path, t: np.ndarray) -> None:
    t = np.asarray(t)
    if t.dtype not in _CODES:
        raise TensorFormatError(f"unsupported dtype {t.dtype}; expected float32 or float64")
    if not 1 <= t.ndim <= 4:
        raise TensorFormatError(f"ndim must be 1..4, got {t.ndim}")
    if min(t.shape) < 1:
        raise TensorFormatError(f"all extents must be >= 1, got {t.shape}")
    header = MAGIC + struct.pack("<BBBB", VERSION, _CODES[t.dtype], t.ndim, 0)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_DTYPES[_CODES[t.dtype]]).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TensorFormatError("truncated file")
    if raw[:4] != MAGIC:
        raise TensorFormatError("magic mismatch")
    version, code, ndim, _ = struct.unpack("<BBBB", raw[4:8])
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"bad ndim {ndim}")
    end = 8 + 8 * ndim
    if len(raw) < end:
        raise TensorFormatError("truncated file")
    dims = struct.unpack(f"<{ndim}Q", raw[8:end])
    n = 1
    for d in dims:
        if d < 1:
            raise TensorFormatError(f"zero extent in {dims}")
        n *= d
        if n > _MAX_ELEMS:
            raise TensorFormatError("extent overflow")
    dtype = _DTYPES[code]
    if len(raw) - end < n * dtype.itemsize:
        raise TensorFormatError("truncated file")
    if len(raw) - end > n * dtype.itemsize:
        raise TensorFormatError("trailing bytes after payload")
    arr = np.frombuffer(raw, dtype=dtype, count=n, offset=end).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


# --------------------------------------------------------------------------
# counter-based RNG

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_uniform(seed, stream, counter) -> np.ndarray:
    """Uniform [0, 1) doubles as a pure function of (seed, stream, counter).

    All three arguments broadcast, so one call can serve many streams at once
    (e.g. one stream per ray).
    """
    with np.errstate(over="ignore"):
        s = np.asarray(seed, dtype=np.uint64)
        st = np.asarray(stream, dtype=np.uint64)
        c = np.asarray(counter, dtype=np.uint64)
        z = _mix64(s * np.uint64(0x9E3779B97F4A7C15) + np.uint64(0x632BE59BD9B4E019))
        z = _mix64(z ^ (st * np.uint64(0xD1B54A32D192ED03)))
        z = _mix64(z + c * np.uint64(0x9E3779B97F4A7C15))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def derive_stream(*keys: int) -> int:
    """Fold integer keys into one 64-bit stream id."""
    with np.errstate(over="ignore"):
        z = np.uint64(0x243F6A8885A308D3)
        for k in keys:
            z = _mix64(z ^ np.uint64(int(k) & 0xFFFFFFFFFFFFFFFF))
    return int(z)


@dataclass
class Rng:
    """Single-owner generator; parallel work should derive a child stream instead."""

    seed: int
    stream_id: int = 0
    counter: int = 0

    def uniform(self, n: int) -> np.ndarray:
        out = hash_uniform(self.seed, self.stream_id, np.arange(self.counter, self.counter + n, dtype=np.uint64))
        self.counter += n
        return out

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, low: int, high: int, n: int | None = None):
        """Uniform integers in [low, high)."""
        k = 1 if n is None else n
        out = low + np.floor(self.uniform(k) * (high - low)).astype(np.int64)
        out = np.minimum(out, high - 1)
        return int(out[0]) if n is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, derive_stream(self.stream_id, *keys))


def rng_uniform(rng: Rng, n: int) -> np.ndarray:
    return rng.uniform(n)


# --------------------------------------------------------------------------
# scene manifest


@dataclass
class SceneManifest:
    scene_id: str
    seed: int
    cameras: list[dict]
    views: list[dict]
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"scene_id": self.scene_id, "seed": self.seed, "cameras": self.cameras, "views": self.views}
        doc.update(self.extra)
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneManifest":
        doc = json.loads(text)
        known = {"scene_id", "seed", "cameras", "views"}
        missing = known - doc.keys()
        if missing:
            raise ValueError(f"manifest missing keys: {sorted(missing)}")
        if len(doc["cameras"]) != len(doc["views"]):
            raise ValueError("manifest needs exactly one camera per view")
        extra = {k: v for k, v in doc.items() if k not in known}
        return cls(doc["scene_id"], int(doc["seed"]), doc["cameras"], doc["views"], extra)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "SceneManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))
