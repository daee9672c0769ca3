"""Weight initialization for classic and geometric layers.

Classic kernels draw each weight as a quaternion whose magnitude follows
a Rayleigh distribution (the magnitude of four i.i.d. zero-mean normals)
with a fan-dependent mode, combined with a uniform angle and a random
unit axis.  Geometric kernels draw (scale, angle) pairs from scaled
uniform distributions.

All sampling uses an explicitly seeded PCG64 generator with inverse-CDF
Rayleigh draws, so streams are reproducible across platforms; the
generator name is exposed for run metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .qcore import Quaternion

RNG_ALGORITHM = "numpy.PCG64"

INIT_MODES = ("quaternion_normalized", "quaternion_relu", "geometric_uniform")


@dataclass(frozen=True)
class InitSpec:
    """Initialization mode plus fan counts and seed."""

    mode: str
    n_in: int
    n_out: int
    seed: int = 0
    isotropic_axis: bool = False  # opt-in symmetric axis sampling

    def __post_init__(self):
        if self.mode not in INIT_MODES:
            raise ShapeError(f"unknown init mode {self.mode!r}")
        if self.n_in < 1 or self.n_out < 1:
            raise ShapeError(
                f"fan counts must be positive, got n_in={self.n_in} "
                f"n_out={self.n_out}")

    @property
    def sigma(self) -> float:
        """Rayleigh mode for the classic initialization branches."""
        if self.mode == "quaternion_relu":
            return 1.0 / math.sqrt(2.0 * self.n_in)
        return 1.0 / math.sqrt(2.0 * (self.n_in + self.n_out))


def make_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _rayleigh(rng: np.random.Generator, sigma: float) -> float:
    # Inverse CDF on a uniform draw; explicit so the stream is stable.
    u = rng.random()
    return sigma * math.sqrt(-2.0 * math.log1p(-u))


def _axis(rng: np.random.Generator, isotropic: bool) -> tuple[float, float, float]:
    while True:
        if isotropic:
            x, y, z = rng.standard_normal(3)
        else:
            x, y, z = rng.random(3)
        norm = math.sqrt(x * x + y * y + z * z)
        if norm > 1e-12:
            return (x / norm, y / norm, z / norm)


def init_classic(spec: InitSpec, count: int) -> list[Quaternion]:
    """Draw classic quaternion weights.

    Per weight, in order: magnitude ~ Rayleigh(sigma), angle ~ U(-pi, pi),
    axis from three U(0, 1) draws normalized (the opt-in isotropic mode
    replaces them with standard normals), then
    w = mag*cos(angle) + mag*sin(angle)*axis, which has norm exactly mag.
    """
    if count < 1:
        raise ShapeError(f"count must be >= 1, got {count}")
    if spec.mode == "geometric_uniform":
        raise ShapeError("geometric_uniform mode belongs to init_geometric")
    rng = make_generator(spec.seed)
    sigma = spec.sigma
    out = []
    for _ in range(count):
        mag = _rayleigh(rng, sigma)
        angle = rng.uniform(-math.pi, math.pi)
        ux, uy, uz = _axis(rng, spec.isotropic_axis)
        c = mag * math.cos(angle)
        s = mag * math.sin(angle)
        out.append(Quaternion(c, s * ux, s * uy, s * uz))
    return out


def init_classic_planes(spec: InitSpec, shape: tuple[int, ...],
                        dtype=np.float64) -> np.ndarray:
    """Same stream as init_classic, laid out as (4, *shape) planes."""
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    values = init_classic(spec, count)
    planes = np.array([[v.r, v.i, v.j, v.k] for v in values], dtype=dtype).T
    return np.ascontiguousarray(planes.reshape(4, *shape))


def geometric_bound(n_in: int, n_out: int) -> float:
    return math.sqrt(6.0) / math.sqrt(n_in + n_out)


def init_geometric(spec: InitSpec, count: int
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Draw (scale, angle) pairs for geometric kernels.

    scale ~ U[-sqrt(6)/sqrt(n_in + n_out), +...], angle ~ U[-pi/2, pi/2].
    """
    if count < 1:
        raise ShapeError(f"count must be >= 1, got {count}")
    rng = make_generator(spec.seed)
    bound = geometric_bound(spec.n_in, spec.n_out)
    scales = np.empty(count)
    angles = np.empty(count)
    for n in range(count):
        scales[n] = rng.uniform(-bound, bound)
        angles[n] = rng.uniform(-math.pi / 2.0, math.pi / 2.0)
    return scales, angles


def init_unit_axes(seed: int, count: int) -> np.ndarray:
    """Random unit 3-vectors for learnable rotation axes, (count, 3)."""
    rng = make_generator(seed)
    out = np.empty((count, 3))
    for n in range(count):
        out[n] = _axis(rng, isotropic=True)
    return out


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    """Standard scaled-uniform initialization for real-valued kernels."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
