"""Dense spatial fields, counter-based random streams and the B3F1 file format.

Every field stores float64 data in row-major ``(y, x, c)`` order.  Values are
immutable after construction: the wrapped arrays are copied and flagged
read-only, so a field can be shared freely between threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParameterError, ShapeError

MAGIC = b"B3F1"
_HEADER = struct.Struct("<4sIII")
_MASK64 = (1 << 64) - 1


def _frozen(array, ndim):
    data = np.array(array, dtype=np.float64, copy=True)
    if data.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d array, got shape {data.shape}")
    if 0 in data.shape:
        raise DimensionError(f"zero-sized dimension in shape {data.shape}")
    data.flags.writeable = False
    return data


@dataclass(frozen=True, eq=False)
class FieldTensor:
    """An ``H x W x C`` real field (task state, evidence, reference or bridge)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 3))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def spatial_shape(self):
        return self.data.shape[:2]

    def __repr__(self):
        return f"FieldTensor(shape={self.shape})"


@dataclass(frozen=True, eq=False)
class ScalarField:
    """An ``H x W`` real map (similarity, variation, gate, step coefficient)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 2))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"


class PrecisionField(ScalarField):
    """A strictly positive :class:`ScalarField`."""

    def __post_init__(self):
        super().__post_init__()
        if not np.all(self.data > 0):
            raise ParameterError("precision values must be strictly positive")


def as_tensor(value):
    return value if isinstance(value, FieldTensor) else FieldTensor(value)


def as_scalar(value):
    return value if isinstance(value, ScalarField) else ScalarField(value)


def tensor_new(height, width, channels, fill=0.0):
    if min(height, width, channels) < 1:
        raise DimensionError(f"dimensions must be >= 1, got {(height, width, channels)}")
    return FieldTensor(np.full((height, width, channels), float(fill)))


_BINOPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def tensor_binop(a, b, op):
    if op not in _BINOPS:
        raise ParameterError(f"unknown op {op!r}; expected one of {sorted(_BINOPS)}")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return FieldTensor(_BINOPS[op](a.data, b.data))


def broadcast_scale(t, s):
    """Multiply every channel of ``t`` by the per-location scalar ``s``."""
    if t.spatial_shape != s.shape:
        raise ShapeError(f"spatial shape mismatch {t.spatial_shape} vs {s.shape}")
    return FieldTensor(t.data * s.data[:, :, None])


def check_same_shape(*tensors):
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError(f"shape mismatch {first} vs {t.shape}")


def check_spatial(shape, *fields):
    for f in fields:
        got = f.spatial_shape if isinstance(f, FieldTensor) else f.shape
        if tuple(got) != tuple(shape):
            raise ShapeError(f"spatial shape mismatch {tuple(shape)} vs {tuple(got)}")


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------


def splitmix64(x):
    """One round of the SplitMix64 finalizer on a Python int."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """Coordinates of a Philox4x64 counter-based stream.

    ``(master_seed, stream_id)`` form the Philox key and ``counter`` the
    first counter word, so identical triples give identical draws on every
    platform.  Streams are values: drawing never mutates them, and child
    streams are derived with :meth:`spawn`.
    """

    master_seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id", "counter"):
            value = int(getattr(self, name))
            object.__setattr__(self, name, value & _MASK64)

    def generator(self):
        bitgen = np.random.Philox(
            key=np.array([self.master_seed, self.stream_id], dtype=np.uint64),
            counter=np.array([self.counter, 0, 0, 0], dtype=np.uint64),
        )
        return np.random.Generator(bitgen)

    def spawn(self, label):
        """Independent child stream keyed by ``label`` (any int or str)."""
        if isinstance(label, str):
            label = int.from_bytes(label.encode("utf-8")[:8].ljust(8, b"\0"), "little") ^ len(label)
        mixed = splitmix64(self.stream_id ^ splitmix64(int(label) & _MASK64))
        return RngStream(self.master_seed, mixed, 0)

    def advance(self, blocks):
        return RngStream(self.master_seed, self.stream_id, self.counter + int(blocks))


def rng_normal(stream, n, mean=0.0, std=1.0):
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full(int(n), float(mean))
    return stream.generator().normal(mean, std, size=int(n))


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def write_field(path, t):
    t = as_tensor(t)
    h, w, c = t.shape
    payload = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, h, w, c) + payload)


def read_field(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if min(h, w, c) < 1:
        raise FormatError(f"{path}: zero dimension in header {(h, w, c)}")
    count = h * w * c
    expected = _HEADER.size + 8 * count
    if count > (1 << 40):
        raise FormatError(f"{path}: dimension overflow {(h, w, c)}")
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=_HEADER.size)
    return FieldTensor(data.reshape(h, w, c))


def scalar_to_csv(s, path=None):
    """Render a ScalarField as ``y,x,value`` rows; write to ``path`` if given."""
    lines = ["y,x,value"]
    for y in range(s.height):
        for x in range(s.width):
            lines.append(f"{y},{x},{float(s.data[y, x])!r}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text, newline="\n")
    return text
