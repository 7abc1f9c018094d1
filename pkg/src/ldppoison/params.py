"""Layer-structured flat parameter vectors.

Every model, upload and aggregate in the simulator is a :class:`ParamVector`:
a float64 array plus a table of named layers that slice it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


@dataclass(frozen=True)
class LayerShape:
    name: str
    offset: int
    length: int


def make_shapes(layers: Sequence[tuple[str, int]]) -> tuple[LayerShape, ...]:
    """Build a contiguous shape table from ``(name, length)`` pairs."""
    shapes = []
    offset = 0
    for name, length in layers:
        if length <= 0:
            raise ValueError(f"layer {name!r} has non-positive length {length}")
        shapes.append(LayerShape(name, offset, int(length)))
        offset += int(length)
    return tuple(shapes)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    shapes: tuple[LayerShape, ...]

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "shapes", tuple(self.shapes))
        expected = 0
        for s in self.shapes:
            if s.offset != expected or s.length <= 0:
                raise ShapeMismatchError(f"shape table not contiguous at layer {s.name!r}")
            expected += s.length
        if expected != v.size:
            raise ShapeMismatchError(f"shape table covers {expected} entries, vector has {v.size}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("parameter vector contains NaN or Inf")

    @classmethod
    def flat(cls, values, name: str = "w") -> "ParamVector":
        """Single-layer vector, handy for tests and scalar examples."""
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(values, make_shapes([(name, values.size)]))

    @property
    def dim(self) -> int:
        return self.values.size

    def layer(self, name: str) -> np.ndarray:
        for s in self.shapes:
            if s.name == name:
                return self.values[s.offset:s.offset + s.length]
        raise KeyError(name)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.shapes)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.shapes == other.shapes and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.shapes, self.values.tobytes()))

    def __repr__(self):
        return f"ParamVector(dim={self.dim}, layers={[s.name for s in self.shapes]})"


def _check_same(a: ParamVector, b: ParamVector) -> None:
    if a.shapes != b.shapes:
        raise ShapeMismatchError("parameter vectors have different shape tables")


def add(a: ParamVector, b: ParamVector) -> ParamVector:
    _check_same(a, b)
    return a.with_values(a.values + b.values)


def sub(a: ParamVector, b: ParamVector) -> ParamVector:
    _check_same(a, b)
    return a.with_values(a.values - b.values)


def scale(a: ParamVector, s: float) -> ParamVector:
    return a.with_values(a.values * float(s))


def l2_norm(a: ParamVector) -> float:
    return float(np.linalg.norm(a.values))


def clip_norm(a: ParamVector, c: float) -> ParamVector:
    """Rescale ``a`` onto the ball of radius ``c``; identity when already inside."""
    if not c > 0:
        raise ValueError(f"clip bound must be positive, got {c}")
    norm = l2_norm(a)
    if norm <= c:
        return a
    out = a.values * (c / norm)
    # rounding can leave the result a hair above c
    while np.linalg.norm(out) > c:
        out = out * (1.0 - 1e-15)
    return a.with_values(out)


def mean(vs: Sequence[ParamVector]) -> ParamVector:
    """Coordinate-wise mean, summed left to right in list order."""
    if len(vs) == 0:
        raise ValueError("mean of an empty list of parameter vectors")
    first = vs[0]
    acc = first.values.copy()
    for v in vs[1:]:
        _check_same(first, v)
        acc += v.values
    return first.with_values(acc / len(vs))


def stack(vs: Sequence[ParamVector]) -> np.ndarray:
    """(n, d) matrix of the vectors' values, after checking shapes agree."""
    if len(vs) == 0:
        raise ValueError("cannot stack an empty list of parameter vectors")
    for v in vs[1:]:
        _check_same(vs[0], v)
    return np.stack([v.values for v in vs])


# Binary container: b"PVEC", u32 layer count, per layer (u16 name length,
# utf-8 name, u64 offset, u64 length), u64 d, then d little-endian float64.
_MAGIC = b"PVEC"


def to_bytes(v: ParamVector) -> bytes:
    parts = [_MAGIC, struct.pack("<I", len(v.shapes))]
    for s in v.shapes:
        name = s.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<QQ", s.offset, s.length))
    parts.append(struct.pack("<Q", v.dim))
    parts.append(v.values.astype("<f8").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> ParamVector:
    if buf[:4] != _MAGIC:
        raise ValueError("not a parameter vector container (bad magic)")
    pos = 4
    (n_layers,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shapes = []
    for _ in range(n_layers):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        offset, length = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        shapes.append(LayerShape(name, offset, length))
    (d,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) - pos != 8 * d:
        raise ValueError(f"container truncated: expected {8 * d} value bytes at offset {pos}")
    values = np.frombuffer(buf, dtype="<f8", count=d, offset=pos)
    return ParamVector(values.astype(np.float64), tuple(shapes))
