"""Quaternion convolutions and the layer paradigms built on them.

Three elementary discrete convolutions exist because the Hamilton product
is non-commutative: kernel-on-the-left, kernel-on-the-right, and the
two-sided form with independent left/right kernels.  On top of these sit
three layer paradigms:

* classic: plain quaternion convolution plus a quaternion bias,
* geometric: every tap is a scaling-plus-rotation (scale, angle, axis)
  applied through a sandwich product,
* equivariant: a real-valued kernel applied to each component plane,
  which makes the layer commute with per-pixel rotations.

Multi-channel inputs combine per-channel outputs through one of three
schemes: autoencoder (channel-matched, concatenated), pyramidal (all
kernel/input pairs, concatenated), or summed (channel-matched, summed).

All forward cores operate on component planes with a batch axis,
shape (4, B, H, W); the public single-sample ops wrap them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError
from .qcore import (
    Quaternion,
    conjugate_planes,
    hamilton_planes,
    quaternions_to_planes,
)
from .qtensor import QTensor, pad as pad_tensor, window_positions

logger = logging.getLogger(__name__)

PARADIGMS = ("classic", "geometric", "geometric_biased", "equivariant")
SCHEMES = ("autoencoder", "pyramidal", "summed")
ORIENTATIONS = ("left", "right", "two_sided")
AXIS_MODES = ("fixed", "learnable")

# Default fixed rotation axis for geometric kernels (configurable; the
# diagonal direction treats the three imaginary channels symmetrically).
DEFAULT_AXIS = (1.0 / math.sqrt(3.0),) * 3

# Floor applied to geometric tap scales before dividing; keeps the
# per-tap division and its gradients finite near zero scale.
SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class ConvSpec:
    """Configuration of one convolution layer."""

    paradigm: str = "classic"
    kernel_extent: int = 0          # 0 means "take it from the kernel"
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    channel_scheme: str = "summed"
    orientation: str = "left"       # classic paradigm only
    flip_kernel: bool = False       # True: true convolution; False: correlation
    axis_mode: str = "fixed"        # geometric paradigm only
    axis: tuple[float, float, float] = DEFAULT_AXIS

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ShapeError(f"unknown paradigm {self.paradigm!r}")
        if self.channel_scheme not in SCHEMES:
            raise ShapeError(f"unknown channel scheme {self.channel_scheme!r}")
        if self.orientation not in ORIENTATIONS:
            raise ShapeError(f"unknown orientation {self.orientation!r}")
        if self.axis_mode not in AXIS_MODES:
            raise ShapeError(f"unknown axis mode {self.axis_mode!r}")
        if self.kernel_extent and self.kernel_extent % 2 == 0:
            raise ShapeError(
                f"kernel extent must be odd, got {self.kernel_extent}")
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"stride must be >= 1 per axis, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"padding must be >= 0, got {self.padding}")


@dataclass
class GeometricKernel:
    """Per-tap scale/angle parameters with a shared or per-kernel axis.

    Each tap reconstructs the quaternion
    ``w = scale * (cos(angle/2) + sin(angle/2) * axis)`` whose magnitude
    equals ``|scale|``.
    """

    scale: np.ndarray              # (..., L, L) real
    angle: np.ndarray              # (..., L, L) real, radians
    axis: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_AXIS))
    bias: Sequence[Quaternion] | None = None  # per output channel, biased only

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.angle = np.asarray(self.angle, dtype=np.float64)
        self.axis = np.asarray(self.axis, dtype=np.float64)
        if self.scale.shape != self.angle.shape:
            raise ShapeError(
                f"scale shape {self.scale.shape} != angle shape "
                f"{self.angle.shape}")
        if self.axis.shape[-1] != 3:
            raise ShapeError(f"axis must end in 3 components, got "
                             f"{self.axis.shape}")

    def taps(self) -> np.ndarray:
        """Reconstructed tap quaternions as planes (4, *scale.shape)."""
        return geometric_taps(self.scale, self.angle, self.axis)


def geometric_taps(scale: np.ndarray, angle: np.ndarray,
                   axis: np.ndarray) -> np.ndarray:
    """Build tap quaternions a*(cos(t/2) + sin(t/2)*axis) as planes.

    ``axis`` is either a single (3,) vector shared by every tap or an
    array broadcastable to ``scale.shape + (3,)`` (normalized here so
    callers may hand in raw learnable parameters).
    """
    scale = np.asarray(scale, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.sqrt(np.sum(axis * axis, axis=-1, keepdims=True))
    if np.any(norm < 1e-30):
        raise ShapeError("rotation axis must be nonzero")
    unit = axis / norm
    half = angle / 2.0
    c = scale * np.cos(half)
    s = scale * np.sin(half)
    if unit.ndim == 1:
        planes = np.stack([c, s * unit[0], s * unit[1], s * unit[2]])
    else:
        if unit.shape[:-1] != scale.shape[:unit.ndim - 1]:
            # axis per kernel: broadcast over the trailing tap axes
            extra = scale.ndim - (unit.ndim - 1)
            unit = unit.reshape(unit.shape[:-1] + (1,) * extra + (3,))
        planes = np.stack([c,
                           s * unit[..., 0],
                           s * unit[..., 1],
                           s * unit[..., 2]])
    return planes


def clamp_scale(scale: np.ndarray) -> np.ndarray:
    """Clamp |scale| >= SCALE_FLOOR, preserving sign (zero goes positive)."""
    scale = np.asarray(scale, dtype=np.float64)
    small = np.abs(scale) < SCALE_FLOOR
    if np.any(small):
        logger.info("clamped %d geometric tap scale(s) below %.0e",
                    int(np.count_nonzero(small)), SCALE_FLOOR)
        signs = np.where(scale < 0.0, -1.0, 1.0)
        return np.where(small, signs * SCALE_FLOOR, scale)
    return scale


def out_extent(n: int, kernel: int, stride: int, padding: int) -> int:
    """Valid-mode output extent after zero padding."""
    return window_positions(n + 2 * padding, kernel, stride)


# ---------------------------------------------------------------------------
# Per-channel-pair batched cores.  Inputs are already padded; planes are
# (4, B, Hp, Wp); kernels are planes (4, L, L) or real (L, L).
# ---------------------------------------------------------------------------

def _tap_slice(q: np.ndarray, a: int, b: int, oh: int, ow: int,
               stride: tuple[int, int]) -> np.ndarray:
    sh, sw = stride
    return q[:, :, a:a + (oh - 1) * sh + 1:sh, b:b + (ow - 1) * sw + 1:sw]


def _tap_index(a: int, b: int, extent: int, flip: bool) -> tuple[int, int]:
    return (extent - 1 - a, extent - 1 - b) if flip else (a, b)


def pair_conv_classic(w: np.ndarray, q: np.ndarray, stride: tuple[int, int],
                      flip: bool, orientation: str = "left",
                      w_right: np.ndarray | None = None) -> np.ndarray:
    """One kernel against one padded input channel, batched.

    Accumulates tap products in fixed row-major tap order, so results are
    reproducible bit-for-bit across calls.
    """
    extent = w.shape[-1]
    oh = window_positions(q.shape[2], extent, stride[0])
    ow = window_positions(q.shape[3], extent, stride[1])
    out = np.zeros((4, q.shape[1], oh, ow), dtype=q.dtype)
    for a in range(extent):
        for b in range(extent):
            wa, wb = _tap_index(a, b, extent, flip)
            win = _tap_slice(q, a, b, oh, ow, stride)
            if orientation == "left":
                tap = w[:, wa, wb][:, None, None, None]
                out += hamilton_planes(tap, win)
            elif orientation == "right":
                tap = w[:, wa, wb][:, None, None, None]
                out += hamilton_planes(win, tap)
            else:  # two_sided
                lt = w[:, wa, wb][:, None, None, None]
                rt = w_right[:, wa, wb][:, None, None, None]
                out += hamilton_planes(hamilton_planes(lt, win), rt)
    return out


def pair_conv_geometric(scale: np.ndarray, angle: np.ndarray,
                        axis: np.ndarray, q: np.ndarray,
                        stride: tuple[int, int], flip: bool) -> np.ndarray:
    """Geometric pair: per tap, (w x w_conj) / scale with w from polar form."""
    taps = geometric_taps(scale, angle, axis)
    denom = clamp_scale(scale)
    extent = scale.shape[-1]
    oh = window_positions(q.shape[2], extent, stride[0])
    ow = window_positions(q.shape[3], extent, stride[1])
    out = np.zeros((4, q.shape[1], oh, ow), dtype=q.dtype)
    for a in range(extent):
        for b in range(extent):
            wa, wb = _tap_index(a, b, extent, flip)
            win = _tap_slice(q, a, b, oh, ow, stride)
            tap = taps[:, wa, wb][:, None, None, None]
            rotated = hamilton_planes(hamilton_planes(tap, win),
                                      conjugate_planes(tap))
            out += rotated / denom[wa, wb]
    return out


def pair_conv_equivariant(kernel: np.ndarray, q: np.ndarray,
                          stride: tuple[int, int], flip: bool) -> np.ndarray:
    """Real kernel applied identically to all four component planes."""
    extent = kernel.shape[-1]
    oh = window_positions(q.shape[2], extent, stride[0])
    ow = window_positions(q.shape[3], extent, stride[1])
    out = np.zeros((4, q.shape[1], oh, ow), dtype=q.dtype)
    for a in range(extent):
        for b in range(extent):
            wa, wb = _tap_index(a, b, extent, flip)
            out += kernel[wa, wb] * _tap_slice(q, a, b, oh, ow, stride)
    return out


# ---------------------------------------------------------------------------
# Public single-sample convolution ops.
# ---------------------------------------------------------------------------

def _check_single(w_shape: tuple[int, ...], q: QTensor,
                  spec: ConvSpec) -> int:
    if len(w_shape) != 2 or w_shape[0] != w_shape[1]:
        raise ShapeError(f"kernel must be square L x L, got {w_shape}")
    extent = w_shape[0]
    if extent % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {extent}")
    if spec.kernel_extent and spec.kernel_extent != extent:
        raise ShapeError(
            f"spec kernel extent {spec.kernel_extent} != kernel {extent}")
    if len(q.shape) != 2:
        raise ShapeError(f"input must be a 2-D quaternion map, got {q.shape}")
    return extent


def _as_batched(q: QTensor, spec: ConvSpec) -> np.ndarray:
    padded = pad_tensor(q, spec.padding)
    return padded.planes[:, None]  # (4, 1, Hp, Wp)


def conv_left(w: QTensor, q: QTensor, spec: ConvSpec = ConvSpec()) -> QTensor:
    """Kernel-on-the-left convolution of a 2-D quaternion map."""
    _check_single(w.shape, q, spec)
    out = pair_conv_classic(w.planes, _as_batched(q, spec), spec.stride,
                            spec.flip_kernel, "left")
    return QTensor(out[:, 0])


def conv_right(q: QTensor, w: QTensor, spec: ConvSpec = ConvSpec()) -> QTensor:
    """Kernel-on-the-right convolution; differs from conv_left because the
    Hamilton product is non-commutative."""
    _check_single(w.shape, q, spec)
    out = pair_conv_classic(w.planes, _as_batched(q, spec), spec.stride,
                            spec.flip_kernel, "right")
    return QTensor(out[:, 0])


def conv_twosided(w_left: QTensor, q: QTensor, w_right: QTensor,
                  spec: ConvSpec = ConvSpec()) -> QTensor:
    """Two-sided convolution with independent left and right kernels."""
    extent = _check_single(w_left.shape, q, spec)
    if w_right.shape != w_left.shape:
        raise ShapeError(
            f"left kernel {w_left.shape} and right kernel {w_right.shape} "
            "must have the same extent")
    del extent
    out = pair_conv_classic(w_left.planes, _as_batched(q, spec), spec.stride,
                            spec.flip_kernel, "two_sided",
                            w_right=w_right.planes)
    return QTensor(out[:, 0])


# ---------------------------------------------------------------------------
# Channel scheme orchestration.
# ---------------------------------------------------------------------------

def scheme_pairs(scheme: str, n_kernels: int,
                 n_channels: int) -> list[tuple[int, int, int]]:
    """(kernel index, input channel, output channel) triples for a scheme.

    autoencoder: kernel s with channel s -> output s (requires K == C).
    pyramidal:  kernel t with channel s -> output t*C + s.
    summed:     kernel group g with channel s -> output g (summed over s).
    """
    if scheme == "autoencoder":
        if n_kernels != n_channels:
            raise ShapeError(
                f"autoencoder scheme needs K == C, got K={n_kernels} "
                f"C={n_channels}")
        return [(s, s, s) for s in range(n_channels)]
    if scheme == "pyramidal":
        return [(t, s, t * n_channels + s)
                for t in range(n_kernels) for s in range(n_channels)]
    if scheme == "summed":
        return [(g, s, g) for g in range(n_kernels)
                for s in range(n_channels)]
    raise ShapeError(f"unknown channel scheme {scheme!r}")


def scheme_output_channels(scheme: str, n_kernels: int,
                           n_channels: int) -> int:
    if scheme == "autoencoder":
        return n_channels
    if scheme == "pyramidal":
        return n_kernels * n_channels
    return n_kernels


def combine_autoencoder(outputs: Sequence[QTensor]) -> QTensor:
    """Concatenate channel-matched outputs along a new channel axis."""
    if not outputs:
        raise ShapeError("no channel outputs to combine")
    return QTensor(np.stack([o.planes for o in outputs], axis=-1))


def combine_pyramidal(outputs: Sequence[Sequence[QTensor]]) -> QTensor:
    """Concatenate the full kernel x channel grid.

    ``outputs[t][s]`` is the map of kernel t on input channel s; the
    result places it at output channel t*C + s.
    """
    if not outputs or not outputs[0]:
        raise ShapeError("no channel outputs to combine")
    flat = [outputs[t][s]
            for t in range(len(outputs)) for s in range(len(outputs[0]))]
    return QTensor(np.stack([o.planes for o in flat], axis=-1))


def combine_summed(outputs: Sequence[QTensor]) -> QTensor:
    """Sum channel-matched outputs into a single quaternion channel."""
    if not outputs:
        raise ShapeError("no channel outputs to combine")
    acc = outputs[0].planes.copy()
    for o in outputs[1:]:
        acc += o.planes
    return QTensor(acc[..., None] if acc.ndim == 3 else acc)


# ---------------------------------------------------------------------------
# Layer-level forward ops (single sample, channels last).
# ---------------------------------------------------------------------------

def _prep_layer_input(q: QTensor, spec: ConvSpec) -> np.ndarray:
    if len(q.shape) != 3:
        raise ShapeError(
            f"layer input must be (H, W, C) quaternion channels, got "
            f"{q.shape}")
    padded = pad_tensor(q, spec.padding)
    return padded.planes[:, None]  # (4, 1, Hp, Wp, C)


def _biases_planes(biases, n_out: int, dtype) -> np.ndarray:
    if biases is None:
        return np.zeros((4, n_out), dtype=dtype)
    if isinstance(biases, QTensor):
        planes = biases.planes
    else:
        planes = quaternions_to_planes(list(biases), dtype=dtype)
    if planes.shape != (4, n_out):
        raise ShapeError(
            f"expected {n_out} bias quaternions, got planes {planes.shape}")
    return planes


def _run_scheme(pair_fn: Callable[[int, int, np.ndarray], np.ndarray],
                q_padded: np.ndarray, spec: ConvSpec, n_kernels: int,
                n_channels: int) -> np.ndarray:
    n_out = scheme_output_channels(spec.channel_scheme, n_kernels, n_channels)
    slots: list[np.ndarray | None] = [None] * n_out
    for kidx, cidx, oidx in scheme_pairs(spec.channel_scheme, n_kernels,
                                         n_channels):
        contrib = pair_fn(kidx, cidx, q_padded[..., cidx])
        if slots[oidx] is None:
            slots[oidx] = contrib
        else:
            slots[oidx] = slots[oidx] + contrib
    return np.stack(slots, axis=-1)  # (4, B, OH, OW, n_out)


def layer_classic(kernels: QTensor, biases, q: QTensor,
                  spec: ConvSpec = ConvSpec(),
                  kernels_right: QTensor | None = None) -> QTensor:
    """Classic convolution layer: quaternion kernels plus quaternion bias.

    Kernel shapes per scheme: autoencoder (C, L, L), pyramidal (K, L, L),
    summed (G, C, L, L).  For the two_sided orientation a matching
    ``kernels_right`` tensor is required.
    """
    kp = kernels.planes
    if spec.channel_scheme == "summed":
        if kp.ndim != 5:
            raise ShapeError(
                f"summed scheme needs kernels (G, C, L, L), got "
                f"{kernels.shape}")
        n_kernels, n_channels = kp.shape[1], kp.shape[2]
        get = lambda kidx, cidx: kp[:, kidx, cidx]
        get_r = (lambda kidx, cidx: kernels_right.planes[:, kidx, cidx]) \
            if kernels_right is not None else None
    else:
        if kp.ndim != 4:
            raise ShapeError(
                f"{spec.channel_scheme} scheme needs kernels (K, L, L), got "
                f"{kernels.shape}")
        n_kernels = kp.shape[1]
        n_channels = q.shape[-1]
        get = lambda kidx, cidx: kp[:, kidx]
        get_r = (lambda kidx, cidx: kernels_right.planes[:, kidx]) \
            if kernels_right is not None else None
    extent = kp.shape[-1]
    if extent % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {extent}")
    if spec.orientation == "two_sided" and kernels_right is None:
        raise ShapeError("two_sided orientation needs kernels_right")
    if q.shape[-1] != n_channels and spec.channel_scheme == "summed":
        raise ShapeError(
            f"kernel expects {n_channels} input channels, got {q.shape[-1]}")
    if spec.channel_scheme == "autoencoder" and n_kernels != q.shape[-1]:
        raise ShapeError(
            f"autoencoder scheme needs K == C, got K={n_kernels} "
            f"C={q.shape[-1]}")

    q_padded = _prep_layer_input(q, spec)

    def pair(kidx: int, cidx: int, chan: np.ndarray) -> np.ndarray:
        wr = get_r(kidx, cidx) if get_r is not None else None
        return pair_conv_classic(get(kidx, cidx), chan, spec.stride,
                                 spec.flip_kernel, spec.orientation,
                                 w_right=wr)

    out = _run_scheme(pair, q_padded, spec, n_kernels, q.shape[-1])
    n_out = out.shape[-1]
    bias = _biases_planes(biases, n_out, out.dtype)
    out = out + bias[:, None, None, None, :]
    return QTensor(out[:, 0])


def layer_geometric(kern: GeometricKernel, q: QTensor,
                    spec: ConvSpec = ConvSpec(paradigm="geometric")) -> QTensor:
    """Geometric convolution layer: per-tap scaled rotations, summed.

    With paradigm ``geometric_biased`` the kernel's per-output-channel
    bias quaternions are added after combination.
    """
    sc, an = kern.scale, kern.angle
    if spec.channel_scheme == "summed":
        if sc.ndim != 4:
            raise ShapeError(
                f"summed scheme needs scale (G, C, L, L), got {sc.shape}")
        n_kernels, n_channels = sc.shape[0], sc.shape[1]
        sel = lambda kidx, cidx: (sc[kidx, cidx], an[kidx, cidx],
                                  _axis_for(kern.axis, kidx, cidx))
    else:
        if sc.ndim != 3:
            raise ShapeError(
                f"{spec.channel_scheme} scheme needs scale (K, L, L), got "
                f"{sc.shape}")
        n_kernels = sc.shape[0]
        n_channels = q.shape[-1]
        sel = lambda kidx, cidx: (sc[kidx], an[kidx],
                                  _axis_for(kern.axis, kidx, None))
    if sc.shape[-1] % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {sc.shape[-1]}")

    q_padded = _prep_layer_input(q, spec)

    def pair(kidx: int, cidx: int, chan: np.ndarray) -> np.ndarray:
        s, a, ax = sel(kidx, cidx)
        return pair_conv_geometric(s, a, ax, chan, spec.stride,
                                   spec.flip_kernel)

    out = _run_scheme(pair, q_padded, spec, n_kernels, q.shape[-1])
    if spec.paradigm == "geometric_biased":
        bias = _biases_planes(kern.bias, out.shape[-1], out.dtype)
        out = out + bias[:, None, None, None, :]
    return QTensor(out[:, 0])


def _axis_for(axis: np.ndarray, kidx: int, cidx: int | None) -> np.ndarray:
    if axis.ndim == 1:
        return axis
    if axis.ndim == 2:
        return axis[kidx]
    if axis.ndim == 3 and cidx is not None:
        return axis[kidx, cidx]
    raise ShapeError(f"axis array of shape {axis.shape} does not match "
                     "the kernel layout")


def layer_equivariant(kernel: np.ndarray, q: QTensor,
                      spec: ConvSpec = ConvSpec(paradigm="equivariant")
                      ) -> QTensor:
    """Equivariant layer: real kernel convolving each component plane.

    Because the kernel is real, the layer commutes with any per-pixel
    sandwich rotation of the input.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if spec.channel_scheme == "summed":
        if kernel.ndim != 4:
            raise ShapeError(
                f"summed scheme needs kernel (G, C, L, L), got "
                f"{kernel.shape}")
        n_kernels, n_channels = kernel.shape[0], kernel.shape[1]
        sel = lambda kidx, cidx: kernel[kidx, cidx]
    else:
        if kernel.ndim != 3:
            raise ShapeError(
                f"{spec.channel_scheme} scheme needs kernel (K, L, L), got "
                f"{kernel.shape}")
        n_kernels = kernel.shape[0]
        n_channels = q.shape[-1]
        sel = lambda kidx, cidx: kernel[kidx]
    if kernel.shape[-1] % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {kernel.shape[-1]}")

    q_padded = _prep_layer_input(q, spec)

    def pair(kidx: int, cidx: int, chan: np.ndarray) -> np.ndarray:
        return pair_conv_equivariant(sel(kidx, cidx), chan, spec.stride,
                                     spec.flip_kernel)

    out = _run_scheme(pair, q_padded, spec, n_kernels, q.shape[-1])
    return QTensor(out[:, 0])
