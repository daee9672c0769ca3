"""Quaternion-valued N-dimensional arrays.

A QTensor stores four parallel real planes (r, i, j, k) in a single
C-contiguous array of shape (4, *shape), which gives planar layout:
the full r plane first, then i, j, k, each row-major.  Tensors are
treated as immutable once built; operations return new tensors or
read-only style views.

The on-disk format ("QT1") is: 4-byte magic ``QT1\\0``, one byte rank,
rank little-endian uint32 extents, then the four float32 planes in
r, i, j, k order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import CheckpointCorruptError, ShapeError
from .qcore import Quaternion

QT1_MAGIC = b"QT1\x00"


class QTensor:
    """N-dimensional array of quaternions backed by component planes."""

    __slots__ = ("planes",)

    def __init__(self, planes: np.ndarray):
        planes = np.asarray(planes)
        if planes.ndim < 1 or planes.shape[0] != 4:
            raise ShapeError(
                f"planes must have shape (4, ...), got {planes.shape}")
        self.planes = planes

    # -- construction -------------------------------------------------

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=np.float64) -> "QTensor":
        return cls(np.zeros((4, *shape), dtype=dtype))

    @classmethod
    def from_components(cls, r, i, j, k) -> "QTensor":
        return cls(np.stack([np.asarray(r), np.asarray(i),
                             np.asarray(j), np.asarray(k)]))

    @classmethod
    def full_of(cls, q: Quaternion, shape: Sequence[int],
                dtype=np.float64) -> "QTensor":
        t = cls.zeros(shape, dtype=dtype)
        t.planes[0] = q.r
        t.planes[1] = q.i
        t.planes[2] = q.j
        t.planes[3] = q.k
        return t

    # -- basic properties ---------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.planes.shape[1:]

    @property
    def dtype(self):
        return self.planes.dtype

    @property
    def size(self) -> int:
        """Number of quaternion elements."""
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def r(self) -> np.ndarray:
        return self.planes[0]

    @property
    def i(self) -> np.ndarray:
        return self.planes[1]

    @property
    def j(self) -> np.ndarray:
        return self.planes[2]

    @property
    def k(self) -> np.ndarray:
        return self.planes[3]

    def astype(self, dtype) -> "QTensor":
        return QTensor(self.planes.astype(dtype))

    def copy(self) -> "QTensor":
        return QTensor(self.planes.copy())

    def __getitem__(self, key) -> "QTensor":
        """Index/slice over the quaternion shape (not the component axis)."""
        if not isinstance(key, tuple):
            key = (key,)
        return QTensor(self.planes[(slice(None),) + key])

    def quaternion_at(self, index) -> Quaternion:
        if not isinstance(index, tuple):
            index = (index,)
        vals = self.planes[(slice(None),) + index]
        if vals.shape != (4,):
            raise ShapeError(f"index {index} does not address one element")
        return Quaternion(*(float(v) for v in vals))

    def quaternions(self) -> Iterator[Quaternion]:
        """All elements in row-major order as scalar quaternions."""
        flat = self.planes.reshape(4, -1)
        for n in range(flat.shape[1]):
            yield Quaternion(*(float(flat[c, n]) for c in range(4)))

    def magnitudes(self) -> np.ndarray:
        p = self.planes
        return np.sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2] + p[3] * p[3])

    # -- arithmetic (elementwise, component-linear) --------------------

    def __add__(self, other: "QTensor") -> "QTensor":
        return QTensor(self.planes + other.planes)

    def __sub__(self, other: "QTensor") -> "QTensor":
        return QTensor(self.planes - other.planes)

    def __mul__(self, scalar: float) -> "QTensor":
        return QTensor(self.planes * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "QTensor":
        return QTensor(-self.planes)

    def allclose(self, other: "QTensor", atol: float = 0.0,
                 rtol: float = 1e-12) -> bool:
        return (self.shape == other.shape
                and np.allclose(self.planes, other.planes,
                                atol=atol, rtol=rtol))

    def __repr__(self) -> str:
        return f"QTensor(shape={self.shape}, dtype={self.dtype})"


# ---------------------------------------------------------------------------
# Channel packing between real multi-channel data and quaternion channels.
# ---------------------------------------------------------------------------

def pack_channels(x: np.ndarray) -> QTensor:
    """Group each run of 4 real channels into one quaternion channel.

    ``x`` has channels last; real channels (4c, 4c+1, 4c+2, 4c+3) become
    the (r, i, j, k) components of quaternion channel c.  Spatial layout
    is preserved.
    """
    x = np.asarray(x)
    if x.ndim < 1:
        raise ShapeError("input must have a channel axis")
    channels = x.shape[-1]
    if channels % 4 != 0:
        raise ShapeError(
            f"channel count {channels} is not a multiple of 4")
    grouped = x.reshape(*x.shape[:-1], channels // 4, 4)
    planes = np.moveaxis(grouped, -1, 0)
    return QTensor(np.ascontiguousarray(planes))


def unpack_channels(t: QTensor) -> np.ndarray:
    """Exact inverse of :func:`pack_channels`."""
    grouped = np.moveaxis(t.planes, 0, -1)
    return np.ascontiguousarray(
        grouped.reshape(*t.shape[:-1], t.shape[-1] * 4))


# ---------------------------------------------------------------------------
# Windowing and padding over leading (spatial) axes.
# ---------------------------------------------------------------------------

def pad(t: QTensor, pad_per_axis: Sequence[int]) -> QTensor:
    """Zero-pad the first len(pad_per_axis) axes by the given counts."""
    widths = [(0, 0)]
    for p in pad_per_axis:
        if p < 0:
            raise ShapeError(f"padding must be non-negative, got {p}")
        widths.append((int(p), int(p)))
    widths.extend((0, 0) for _ in range(len(t.shape) - len(pad_per_axis)))
    if all(lo == 0 and hi == 0 for lo, hi in widths):
        return t
    return QTensor(np.pad(t.planes, widths))


def window_positions(extent_in: int, extent_win: int, stride: int) -> int:
    """Number of valid window placements along one axis."""
    if extent_win > extent_in:
        raise ShapeError(
            f"window extent {extent_win} exceeds input extent {extent_in}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    return (extent_in - extent_win) // stride + 1


def window(t: QTensor, extent: Sequence[int], stride: Sequence[int] | int = 1,
           origin: Sequence[int] | None = None) -> Iterator[QTensor]:
    """Yield sub-tensor views in row-major scan order.

    The window covers the first len(extent) axes; trailing axes are
    carried whole.  Iteration order is deterministic: the last windowed
    axis varies fastest.
    """
    extent = tuple(int(e) for e in extent)
    naxes = len(extent)
    if naxes > len(t.shape):
        raise ShapeError("window rank exceeds tensor rank")
    if isinstance(stride, int):
        stride = (stride,) * naxes
    stride = tuple(int(s) for s in stride)
    origin = tuple(int(o) for o in (origin or (0,) * naxes))
    counts = [
        window_positions(t.shape[a] - origin[a], extent[a], stride[a])
        for a in range(naxes)
    ]
    for flat in range(int(np.prod(counts, dtype=np.int64))):
        idx = []
        rem = flat
        for c in reversed(counts):
            idx.append(rem % c)
            rem //= c
        idx.reverse()
        key = tuple(
            slice(origin[a] + idx[a] * stride[a],
                  origin[a] + idx[a] * stride[a] + extent[a])
            for a in range(naxes)
        )
        yield t[key]


# ---------------------------------------------------------------------------
# QT1 file format.
# ---------------------------------------------------------------------------

def save_qt(t: QTensor, path) -> None:
    """Write a tensor in the QT1 format (always float32 planes)."""
    shape = t.shape
    if len(shape) > 255:
        raise ShapeError("QT1 supports rank <= 255")
    planes = np.ascontiguousarray(t.planes, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(QT1_MAGIC)
        fh.write(struct.pack("<B", len(shape)))
        for extent in shape:
            fh.write(struct.pack("<I", extent))
        fh.write(planes.tobytes(order="C"))


def load_qt(path) -> QTensor:
    """Read a QT1 tensor file; raises CheckpointCorruptError if malformed."""
    data = Path(path).read_bytes()
    if len(data) < 5 or data[:4] != QT1_MAGIC:
        raise CheckpointCorruptError(f"{path}: bad QT1 magic")
    rank = data[4]
    header_end = 5 + 4 * rank
    if len(data) < header_end:
        raise CheckpointCorruptError(f"{path}: truncated QT1 header")
    shape = struct.unpack(f"<{rank}I", data[5:header_end]) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    expected = header_end + 4 * count * 4
    if len(data) != expected:
        raise CheckpointCorruptError(
            f"{path}: expected {expected} bytes, found {len(data)}")
    planes = np.frombuffer(data[header_end:], dtype="<f4").reshape(4, *shape)
    return QTensor(planes.copy())
