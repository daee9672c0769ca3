"""Quaternion scalar algebra.

A quaternion is written q = q_r + q_i*i + q_j*j + q_k*k with the basis
rules i^2 = j^2 = k^2 = ijk = -1, which make the product associative and
non-commutative.  This module provides the scalar operations (Hamilton
product, conjugation, magnitude, polar decomposition, rotation actions)
plus vectorized "plane" kernels that apply the same formulas to stacked
component arrays of shape (4, ...).  The plane kernels are what the layer
code builds on; the scalar type is convenient for tests and small values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

# Tolerance for "this quaternion must be a unit versor" preconditions.
UNIT_TOL = 1e-9
# Below this imaginary norm the rotation axis is considered undefined.
DEGENERATE_IMAG = 1e-12
# Axis used by convention when the imaginary part vanishes.
DEGENERATE_AXIS = (1.0, 0.0, 0.0)


@dataclass(frozen=True)
class Quaternion:
    """Immutable quaternion value with real components (r, i, j, k)."""

    r: float = 0.0
    i: float = 0.0
    j: float = 0.0
    k: float = 0.0

    def __add__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion(self.r + other.r, self.i + other.i,
                          self.j + other.j, self.k + other.k)

    def __sub__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion(self.r - other.r, self.i - other.i,
                          self.j - other.j, self.k - other.k)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.r, -self.i, -self.j, -self.k)

    def __mul__(self, other):
        if isinstance(other, Quaternion):
            return hamilton(self, other)
        return Quaternion(self.r * other, self.i * other,
                          self.j * other, self.k * other)

    def __rmul__(self, scalar: float) -> "Quaternion":
        return Quaternion(self.r * scalar, self.i * scalar,
                          self.j * scalar, self.k * scalar)

    def conjugate(self) -> "Quaternion":
        return conjugate(self)

    def magnitude(self) -> float:
        return magnitude(self)

    def imag_norm(self) -> float:
        return math.sqrt(self.i * self.i + self.j * self.j + self.k * self.k)

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.array([self.r, self.i, self.j, self.k], dtype=dtype)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Quaternion":
        r, i, j, k = (float(x) for x in a)
        return cls(r, i, j, k)

    def isclose(self, other: "Quaternion", *, rel: float = 1e-12,
                abs_tol: float = 1e-12) -> bool:
        return all(
            math.isclose(a, b, rel_tol=rel, abs_tol=abs_tol)
            for a, b in zip(self.as_array(), other.as_array())
        )


ZERO = Quaternion()
ONE = Quaternion(1.0)
I = Quaternion(0.0, 1.0)
J = Quaternion(0.0, 0.0, 1.0)
K = Quaternion(0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class PolarQuaternion:
    """Polar decomposition: magnitude, angle to the real axis, unit axis.

    The angle lies in [0, pi]; the axis is the normalized imaginary
    direction (or the (1,0,0) convention when that direction vanishes).
    """

    magnitude: float
    angle: float
    axis: tuple[float, float, float]


def hamilton(p: Quaternion, q: Quaternion) -> Quaternion:
    """Hamilton product p*q (non-commutative), expanded termwise."""
    return Quaternion(
        p.r * q.r - p.i * q.i - p.j * q.j - p.k * q.k,
        p.r * q.i + p.i * q.r + p.j * q.k - p.k * q.j,
        p.r * q.j - p.i * q.k + p.j * q.r + p.k * q.i,
        p.r * q.k + p.i * q.j - p.j * q.i + p.k * q.r,
    )


def conjugate(q: Quaternion) -> Quaternion:
    """Negate the imaginary components, keep the real one."""
    return Quaternion(q.r, -q.i, -q.j, -q.k)


def magnitude(q: Quaternion) -> float:
    """Euclidean norm of the four components.

    Uses hypot so the result is zero only for the zero quaternion even
    when component squares would underflow.
    """
    return math.hypot(q.r, q.i, q.j, q.k)


def to_polar(q: Quaternion) -> PolarQuaternion:
    """Decompose q into (magnitude, angle, unit axis).

    The angle is atan2(|imag(q)|, q_r), so it is well defined for negative
    real parts and lands in [0, pi].  Pure-real quaternions get the
    conventional axis (1,0,0) with angle 0 (q_r >= 0) or pi (q_r < 0);
    the zero quaternion maps to (0, 0, (1,0,0)).
    """
    mag = magnitude(q)
    imag = q.imag_norm()
    if mag == 0.0:
        return PolarQuaternion(0.0, 0.0, DEGENERATE_AXIS)
    if imag < DEGENERATE_IMAG:
        angle = 0.0 if q.r >= 0.0 else math.pi
        return PolarQuaternion(mag, angle, DEGENERATE_AXIS)
    angle = math.atan2(imag, q.r)
    return PolarQuaternion(mag, angle, (q.i / imag, q.j / imag, q.k / imag))


def from_polar(p: PolarQuaternion) -> Quaternion:
    """Rebuild magnitude * (cos(angle) + sin(angle) * axis)."""
    ax, ay, az = p.axis
    norm = math.sqrt(ax * ax + ay * ay + az * az)
    if abs(norm - 1.0) > UNIT_TOL:
        raise ValueError(f"polar axis must be unit length, got norm {norm!r}")
    c = p.magnitude * math.cos(p.angle)
    s = p.magnitude * math.sin(p.angle)
    return Quaternion(c, s * ax, s * ay, s * az)


def _require_versor(w: Quaternion, name: str) -> None:
    if abs(magnitude(w) - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} must be a unit versor, got magnitude "
                         f"{magnitude(w)!r}")


def left_rotate(w: Quaternion, q: Quaternion) -> Quaternion:
    """Left action w*q of a unit versor: a 4D rotation of q."""
    _require_versor(w, "w")
    return hamilton(w, q)


def sandwich(w: Quaternion, q: Quaternion) -> Quaternion:
    """Sandwich product w*q*conj(w) for a unit versor w.

    Rotates the imaginary part of q while preserving its real part and
    magnitude.
    """
    _require_versor(w, "w")
    return hamilton(hamilton(w, q), conjugate(w))


def versor(angle: float, axis: Sequence[float]) -> Quaternion:
    """Unit versor cos(angle) + sin(angle)*axis for a unit axis."""
    return from_polar(PolarQuaternion(1.0, angle, tuple(float(a) for a in axis)))


# ---------------------------------------------------------------------------
# Vectorized plane kernels.  All take component-stacked arrays of shape
# (4, ...) where axis 0 is (r, i, j, k); they broadcast like numpy.
# ---------------------------------------------------------------------------

# Hamilton product table: component c of p*q is
#   sum over entries (c, c1, c2, sign) of sign * p[c1] * q[c2].
HAMILTON_TABLE: tuple[tuple[int, int, int, float], ...] = (
    (0, 0, 0, 1.0), (0, 1, 1, -1.0), (0, 2, 2, -1.0), (0, 3, 3, -1.0),
    (1, 0, 1, 1.0), (1, 1, 0, 1.0), (1, 2, 3, 1.0), (1, 3, 2, -1.0),
    (2, 0, 2, 1.0), (2, 1, 3, -1.0), (2, 2, 0, 1.0), (2, 3, 1, 1.0),
    (3, 0, 3, 1.0), (3, 1, 2, 1.0), (3, 2, 1, -1.0), (3, 3, 0, 1.0),
)


def hamilton_planes(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Elementwise Hamilton product of two (4, ...) component stacks."""
    pr, pi, pj, pk = p[0], p[1], p[2], p[3]
    qr, qi, qj, qk = q[0], q[1], q[2], q[3]
    return np.stack((
        pr * qr - pi * qi - pj * qj - pk * qk,
        pr * qi + pi * qr + pj * qk - pk * qj,
        pr * qj - pi * qk + pj * qr + pk * qi,
        pr * qk + pi * qj - pj * qi + pk * qr,
    ))


def conjugate_planes(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[1:] = -out[1:]
    return out


def magnitude_planes(q: np.ndarray) -> np.ndarray:
    """Per-element magnitudes; shape drops the leading component axis."""
    return np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])


def dot_planes(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-element 4-component real dot product."""
    return p[0] * q[0] + p[1] * q[1] + p[2] * q[2] + p[3] * q[3]


def sandwich_planes(w: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Elementwise w*q*conj(w) (no unit check; callers own that)."""
    return hamilton_planes(hamilton_planes(w, q), conjugate_planes(w))


def hamilton_contract(p: np.ndarray, q: np.ndarray, spec: str) -> np.ndarray:
    """Hamilton product whose real multiply is an einsum contraction.

    ``spec`` is an einsum signature for one component pair, e.g.
    ``"on,bn->bo"`` contracts weight planes (O, N) against input planes
    (B, N).  Used for fully connected layers and their gradients.
    """
    out = None
    for c, c1, c2, sign in HAMILTON_TABLE:
        term = sign * np.einsum(spec, p[c1], q[c2])
        if out is None:
            out = [np.zeros_like(term) for _ in range(4)]
        out[c] += term
    return np.stack(out)


def left_matrix(q: Quaternion | np.ndarray) -> np.ndarray:
    """4x4 real matrix M with M @ vec(x) = vec(q*x).

    Accepts a scalar Quaternion or a length-4 component vector.
    """
    if isinstance(q, Quaternion):
        r, i, j, k = q.r, q.i, q.j, q.k
    else:
        r, i, j, k = (float(c) for c in np.asarray(q))
    return np.array([
        [r, -i, -j, -k],
        [i, r, -k, j],
        [j, k, r, -i],
        [k, -j, i, r],
    ])


def block_matrix(planes: np.ndarray) -> np.ndarray:
    """Real 4K x 4L block expansion of a K x L quaternion matrix.

    ``planes`` has shape (4, K, L); entry (k, l) becomes its 4x4
    left-multiplication block, so the block matrix acting on stacked
    component 4-vectors equals the quaternion matrix acting by left
    products.
    """
    if planes.ndim != 3 or planes.shape[0] != 4:
        raise ShapeError(f"expected (4, K, L) planes, got {planes.shape}")
    _, rows, cols = planes.shape
    out = np.zeros((4 * rows, 4 * cols), dtype=np.float64)
    for c, c1, c2, sign in HAMILTON_TABLE:
        out[c::4, c2::4] += sign * planes[c1]
    return out


def quaternions_to_planes(values: Iterable[Quaternion],
                          dtype=np.float64) -> np.ndarray:
    """Stack scalar quaternions into a (4, n) component array."""
    arr = np.array([[v.r, v.i, v.j, v.k] for v in values], dtype=dtype)
    if arr.size == 0:
        return np.zeros((4, 0), dtype=dtype)
    return arr.T.copy()
