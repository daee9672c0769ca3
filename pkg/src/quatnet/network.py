"""Trainable layers and the network container.

Every layer implements an explicit layer-local backward rule instead of
relying on autodiff: ``forward`` returns the output plus a cache, and
``backward`` turns the error arriving from above into (a) update
directions for the layer's own parameters and (b) the error handed to the
layer below.  The propagated signal is the negative loss gradient, so
``param += lr * update`` is gradient descent.

Activations flow as component planes with a batch axis: convolutional
stages use shape (4, B, H, W, C), dense stages (4, B, U).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CheckpointMismatchError, ShapeError
from .qcore import (
    conjugate_planes,
    dot_planes,
    hamilton_contract,
    hamilton_planes,
    magnitude_planes,
)
from .qconv import (
    SCALE_FLOOR,
    ConvSpec,
    geometric_taps,
    out_extent,
    pair_conv_classic,
    pair_conv_equivariant,
    scheme_output_channels,
    scheme_pairs,
    _tap_index,
    _tap_slice,
)
from .qinit import InitSpec, glorot_uniform, init_classic_planes, \
    init_geometric, init_unit_axes, make_generator
from .qlayers import (
    BNState,
    NORM_FLOOR,
    fully_pool_select,
    rerelu_planes,
    rqbn_forward,
    split_apply,
    split_branch,
    split_derivative,
    tri_to_symmetric,
    vqbn_forward,
    wqbn_forward,
)
from .qtensor import QTensor

logger = logging.getLogger(__name__)


@dataclass
class Param:
    """One trainable array: quaternion params store planes (4, ...)."""

    name: str
    array: np.ndarray
    quaternion: bool = True


class Layer:
    """Base class; subclasses fill in shapes, params, forward, backward."""

    name = "layer"
    # attribute names of parameter/buffer arrays, for dtype conversion
    _array_attrs: tuple[str, ...] = ()

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> list[Param]:
        """Non-trainable persistent arrays (running statistics, axes)."""
        return []

    def forward(self, x: np.ndarray, training: bool = False,
                update_running: bool = False, frozen=None):
        raise NotImplementedError

    def backward(self, d_top: np.ndarray, cache) -> tuple[np.ndarray, dict]:
        raise NotImplementedError

    def apply_updates(self, updates: dict, lr: float) -> None:
        by_name = {p.name: p.array for p in self.params()}
        for key, u in updates.items():
            by_name[key] += lr * u
        self._post_step()

    def _post_step(self) -> None:
        pass

    def frozen_constants(self, cache):
        """Constants the backward treats as fixed (for finite differences)."""
        return None

    def branch_signature(self, cache):
        """Discrete decisions taken during forward, or None if smooth."""
        return None

    def quaternion_param_count(self) -> int:
        """Number of quaternion-valued parameter slots this layer owns."""
        count = 0
        for p in self.params():
            if p.quaternion:
                count += p.array.size // 4
            elif p.name in ("scale",):
                count += p.array.size  # each geometric tap is one slot
        return count

    def stored_real_count(self) -> int:
        return sum(p.array.size for p in self.params())

    def weight_magnitudes(self) -> np.ndarray:
        mags = []
        for p in self.params():
            if p.quaternion:
                mags.append(magnitude_planes(p.array).ravel())
            elif p.name == "scale":
                mags.append(np.abs(p.array).ravel())
        if not mags:
            return np.zeros(0)
        return np.concatenate(mags)

    def astype(self, dtype) -> None:
        for attr in self._array_attrs:
            arr = getattr(self, attr, None)
            if arr is not None:
                setattr(self, attr, arr.astype(dtype))


def _pad_batch(x: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0), (ph, ph), (pw, pw), (0, 0)])


def _layer_seed(seed: int, salt: int) -> int:
    return (seed * 1_000_003 + salt) % (2 ** 63)


# ---------------------------------------------------------------------------
# Convolution layers.
# ---------------------------------------------------------------------------

class ClassicConv(Layer):
    """Quaternion convolution layer with quaternion bias.

    ``n_kernels`` means: kernel groups (summed scheme), kernel channels
    (pyramidal), and is forced to the input channel count for the
    autoencoder scheme.
    """

    name = "conv_classic"
    _array_attrs = ("weights", "weights_right", "bias")

    def __init__(self, in_channels: int, n_kernels: int, spec: ConvSpec,
                 seed: int = 0, bias: bool = True, dtype=np.float64,
                 init_mode: str = "quaternion_relu"):
        if spec.kernel_extent < 1:
            raise ShapeError("ConvSpec.kernel_extent must be set for layers")
        self.spec = spec
        self.in_channels = in_channels
        extent = spec.kernel_extent
        if spec.channel_scheme == "summed":
            shape = (n_kernels, in_channels, extent, extent)
        elif spec.channel_scheme == "autoencoder":
            n_kernels = in_channels
            shape = (n_kernels, extent, extent)
        else:
            shape = (n_kernels, extent, extent)
        self.n_kernels = n_kernels
        self.n_out = scheme_output_channels(spec.channel_scheme, n_kernels,
                                            in_channels)
        fan_in = in_channels * extent * extent
        fan_out = self.n_out * extent * extent
        ispec = InitSpec(init_mode, fan_in, fan_out, seed)
        self.weights = init_classic_planes(ispec, shape, dtype=dtype)
        self.weights_right = None
        if spec.orientation == "two_sided":
            self.weights_right = init_classic_planes(
                InitSpec(init_mode, fan_in, fan_out, _layer_seed(seed, 7)),
                shape, dtype=dtype)
        self.bias = np.zeros((4, self.n_out), dtype=dtype) if bias else None

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(
                f"{self.name} needs (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"{self.name} expects {self.in_channels} channels, got {c}")
        s = self.spec
        return (out_extent(h, s.kernel_extent, s.stride[0], s.padding[0]),
                out_extent(w, s.kernel_extent, s.stride[1], s.padding[1]),
                self.n_out)

    def params(self):
        out = [Param("weights", self.weights)]
        if self.weights_right is not None:
            out.append(Param("weights_right", self.weights_right))
        if self.bias is not None:
            out.append(Param("bias", self.bias))
        return out

    def _kernel(self, source: np.ndarray, kidx: int, cidx: int) -> np.ndarray:
        if self.spec.channel_scheme == "summed":
            return source[:, kidx, cidx]
        return source[:, kidx]

    def forward(self, x, training=False, update_running=False, frozen=None):
        spec = self.spec
        padded = _pad_batch(x, spec.padding)
        slots = [None] * self.n_out
        for kidx, cidx, oidx in scheme_pairs(spec.channel_scheme,
                                             self.n_kernels,
                                             self.in_channels):
            wl = self._kernel(self.weights, kidx, cidx)
            wr = (self._kernel(self.weights_right, kidx, cidx)
                  if self.weights_right is not None else None)
            contrib = pair_conv_classic(wl, padded[..., cidx], spec.stride,
                                        spec.flip_kernel, spec.orientation,
                                        w_right=wr)
            slots[oidx] = contrib if slots[oidx] is None \
                else slots[oidx] + contrib
        out = np.stack(slots, axis=-1)
        if self.bias is not None:
            out = out + self.bias[:, None, None, None, :]
        cache = {"padded": padded, "in_shape": x.shape}
        return out, cache

    def backward(self, d_top, cache):
        spec = self.spec
        padded = cache["padded"]
        extent = spec.kernel_extent
        oh, ow = d_top.shape[2], d_top.shape[3]
        d_pad = np.zeros_like(padded)
        u_w = np.zeros_like(self.weights)
        u_wr = (np.zeros_like(self.weights_right)
                if self.weights_right is not None else None)
        for kidx, cidx, oidx in scheme_pairs(spec.channel_scheme,
                                             self.n_kernels,
                                             self.in_channels):
            delta = d_top[..., oidx]
            chan = padded[..., cidx]
            wl = self._kernel(self.weights, kidx, cidx)
            wr = (self._kernel(self.weights_right, kidx, cidx)
                  if self.weights_right is not None else None)
            kslice = ((kidx, cidx) if spec.channel_scheme == "summed"
                      else (kidx,))
            for a in range(extent):
                for b in range(extent):
                    wa, wb = _tap_index(a, b, extent, spec.flip_kernel)
                    win = _tap_slice(chan, a, b, oh, ow, spec.stride)
                    win_conj = conjugate_planes(win)
                    tgt = d_pad[:, :,
                                a:a + (oh - 1) * spec.stride[0] + 1:spec.stride[0],
                                b:b + (ow - 1) * spec.stride[1] + 1:spec.stride[1],
                                cidx]
                    if spec.orientation == "left":
                        grad = hamilton_planes(delta, win_conj)
                        tap = conjugate_planes(wl[:, wa, wb])[:, None, None, None]
                        tgt += hamilton_planes(tap, delta)
                    elif spec.orientation == "right":
                        grad = hamilton_planes(win_conj, delta)
                        tap = conjugate_planes(wl[:, wa, wb])[:, None, None, None]
                        tgt += hamilton_planes(delta, tap)
                    else:
                        lt = wl[:, wa, wb][:, None, None, None]
                        rt = wr[:, wa, wb][:, None, None, None]
                        grad = hamilton_planes(
                            hamilton_planes(delta, conjugate_planes(rt)),
                            win_conj)
                        grad_r = hamilton_planes(
                            hamilton_planes(win_conj, conjugate_planes(lt)),
                            delta)
                        u_wr[(slice(None),) + kslice + (wa, wb)] += \
                            grad_r.sum(axis=(1, 2, 3))
                        tgt += hamilton_planes(
                            hamilton_planes(conjugate_planes(lt), delta),
                            conjugate_planes(rt))
                    u_w[(slice(None),) + kslice + (wa, wb)] += \
                        grad.sum(axis=(1, 2, 3))
        updates = {"weights": u_w}
        if u_wr is not None:
            updates["weights_right"] = u_wr
        if self.bias is not None:
            updates["bias"] = d_top.sum(axis=(1, 2, 3))
        ph, pw = spec.padding
        h, w = cache["in_shape"][2], cache["in_shape"][3]
        d_bottom = d_pad[:, :, ph:ph + h, pw:pw + w, :]
        return d_bottom, updates


class GeometricConv(Layer):
    """Geometric convolution: per-tap (scale, angle, axis) parameters.

    Each tap applies a sandwich rotation plus signed scaling.  Gradients
    are the exact chain-rule derivatives with respect to the polar
    parameters, so finite differences validate them on any data.
    """

    name = "conv_geometric"
    _array_attrs = ("scale", "angle", "axis", "fixed_axis", "bias")

    def __init__(self, in_channels: int, n_kernels: int, spec: ConvSpec,
                 seed: int = 0, dtype=np.float64):
        if spec.kernel_extent < 1:
            raise ShapeError("ConvSpec.kernel_extent must be set for layers")
        if spec.paradigm not in ("geometric", "geometric_biased"):
            spec = ConvSpec(**{**spec.__dict__, "paradigm": "geometric"})
        self.spec = spec
        self.in_channels = in_channels
        extent = spec.kernel_extent
        if spec.channel_scheme == "summed":
            shape = (n_kernels, in_channels, extent, extent)
        elif spec.channel_scheme == "autoencoder":
            n_kernels = in_channels
            shape = (n_kernels, extent, extent)
        else:
            shape = (n_kernels, extent, extent)
        self.n_kernels = n_kernels
        self.kernel_shape = shape
        self.n_out = scheme_output_channels(spec.channel_scheme, n_kernels,
                                            in_channels)
        fan_in = in_channels * extent * extent
        fan_out = self.n_out * extent * extent
        ispec = InitSpec("geometric_uniform", fan_in, fan_out, seed)
        count = int(np.prod(shape))
        scales, angles = init_geometric(ispec, count)
        self.scale = scales.reshape(shape).astype(dtype)
        self.angle = angles.reshape(shape).astype(dtype)
        n_axes = int(np.prod(shape[:-2]))
        if spec.axis_mode == "learnable":
            self.axis = init_unit_axes(_layer_seed(seed, 11), n_axes) \
                .reshape(shape[:-2] + (3,)).astype(dtype)
            self.fixed_axis = None
        else:
            self.axis = None
            self.fixed_axis = np.asarray(spec.axis, dtype=dtype)
        self.bias = (np.zeros((4, self.n_out), dtype=dtype)
                     if spec.paradigm == "geometric_biased" else None)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(
                f"{self.name} needs (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"{self.name} expects {self.in_channels} channels, got {c}")
        s = self.spec
        return (out_extent(h, s.kernel_extent, s.stride[0], s.padding[0]),
                out_extent(w, s.kernel_extent, s.stride[1], s.padding[1]),
                self.n_out)

    def params(self):
        out = [Param("scale", self.scale, quaternion=False),
               Param("angle", self.angle, quaternion=False)]
        if self.axis is not None:
            out.append(Param("axis", self.axis, quaternion=False))
        if self.bias is not None:
            out.append(Param("bias", self.bias))
        return out

    def buffers(self):
        if self.fixed_axis is not None:
            return [Param("fixed_axis", self.fixed_axis, quaternion=False)]
        return []

    def _post_step(self):
        if self.axis is not None:
            norms = np.sqrt(np.sum(self.axis * self.axis, axis=-1,
                                   keepdims=True))
            np.divide(self.axis, norms, out=self.axis, where=norms > 0)

    def _pair_key(self, kidx: int, cidx: int) -> tuple:
        if self.spec.channel_scheme == "summed":
            return (kidx, cidx)
        return (kidx,)

    def _unit_axis(self, key: tuple) -> tuple[np.ndarray, float]:
        """Normalized axis for a kernel plus the raw norm (for gradients)."""
        if self.axis is not None:
            raw = self.axis[key]
        else:
            raw = self.fixed_axis
        norm = float(np.sqrt(np.sum(raw * raw)))
        if norm <= 0.0:
            raise ShapeError("rotation axis degenerated to zero")
        return raw / norm, norm

    @staticmethod
    def _versor_planes(angle: np.ndarray, unit: np.ndarray) -> np.ndarray:
        half = angle / 2.0
        c, s = np.cos(half), np.sin(half)
        return np.stack([c, s * unit[0], s * unit[1], s * unit[2]])

    @staticmethod
    def _versor_dtheta(angle: np.ndarray, unit: np.ndarray) -> np.ndarray:
        half = angle / 2.0
        c, s = np.cos(half), np.sin(half)
        return 0.5 * np.stack([-s, c * unit[0], c * unit[1], c * unit[2]])

    @staticmethod
    def _eff_scale(scale: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Literal (scale^2 / clamped) factor and its derivative in scale."""
        clamped = np.where(np.abs(scale) < SCALE_FLOOR,
                           np.where(scale < 0, -SCALE_FLOOR, SCALE_FLOOR),
                           scale)
        eff = scale * scale / clamped
        deff = np.where(np.abs(scale) < SCALE_FLOOR, 2.0 * scale / clamped,
                        np.ones_like(scale))
        return eff, deff

    def forward(self, x, training=False, update_running=False, frozen=None):
        spec = self.spec
        padded = _pad_batch(x, spec.padding)
        extent = spec.kernel_extent
        slots = [None] * self.n_out
        for kidx, cidx, oidx in scheme_pairs(spec.channel_scheme,
                                             self.n_kernels,
                                             self.in_channels):
            key = self._pair_key(kidx, cidx)
            unit, _ = self._unit_axis(key)
            eff, _ = self._eff_scale(self.scale[key])
            versors = self._versor_planes(self.angle[key], unit)
            chan = padded[..., cidx]
            oh = out_extent(x.shape[2], extent, spec.stride[0],
                            spec.padding[0])
            ow = out_extent(x.shape[3], extent, spec.stride[1],
                            spec.padding[1])
            contrib = np.zeros((4, x.shape[1], oh, ow), dtype=x.dtype)
            for a in range(extent):
                for b in range(extent):
                    wa, wb = _tap_index(a, b, extent, spec.flip_kernel)
                    win = _tap_slice(chan, a, b, oh, ow, spec.stride)
                    v = versors[:, wa, wb][:, None, None, None]
                    rot = hamilton_planes(hamilton_planes(v, win),
                                          conjugate_planes(v))
                    contrib += eff[wa, wb] * rot
            slots[oidx] = contrib if slots[oidx] is None \
                else slots[oidx] + contrib
        out = np.stack(slots, axis=-1)
        if self.bias is not None:
            out = out + self.bias[:, None, None, None, :]
        return out, {"padded": padded, "in_shape": x.shape}

    def backward(self, d_top, cache):
        spec = self.spec
        padded = cache["padded"]
        extent = spec.kernel_extent
        oh, ow = d_top.shape[2], d_top.shape[3]
        d_pad = np.zeros_like(padded)
        u_scale = np.zeros_like(self.scale)
        u_angle = np.zeros_like(self.angle)
        u_axis = np.zeros_like(self.axis) if self.axis is not None else None
        basis = np.eye(4)[1:]  # pure imaginary unit quaternions
        for kidx, cidx, oidx in scheme_pairs(spec.channel_scheme,
                                             self.n_kernels,
                                             self.in_channels):
            key = self._pair_key(kidx, cidx)
            unit, axis_norm = self._unit_axis(key)
            scale_k = self.scale[key]
            eff, deff = self._eff_scale(scale_k)
            versors = self._versor_planes(self.angle[key], unit)
            dversors = self._versor_dtheta(self.angle[key], unit)
            delta = d_top[..., oidx]
            chan = padded[..., cidx]
            axis_grad = np.zeros(3) if u_axis is not None else None
            for a in range(extent):
                for b in range(extent):
                    wa, wb = _tap_index(a, b, extent, spec.flip_kernel)
                    win = _tap_slice(chan, a, b, oh, ow, spec.stride)
                    v = versors[:, wa, wb][:, None, None, None]
                    vc = conjugate_planes(v)
                    rot = hamilton_planes(hamilton_planes(v, win), vc)
                    # scale update: d/d_scale = deff * (v x v~)
                    u_scale[key + (wa, wb)] += deff[wa, wb] * float(
                        np.sum(dot_planes(delta, rot)))
                    # angle update through d(versor)/d_theta on both sides
                    dv = dversors[:, wa, wb][:, None, None, None]
                    term = hamilton_planes(hamilton_planes(dv, win), vc) + \
                        hamilton_planes(hamilton_planes(v, win),
                                        conjugate_planes(dv))
                    u_angle[key + (wa, wb)] += eff[wa, wb] * float(
                        np.sum(dot_planes(delta, term)))
                    if u_axis is not None:
                        half = self.angle[key][wa, wb] / 2.0
                        s_half = np.sin(half)
                        for m in range(3):
                            e = basis[m][:, None, None, None]
                            dterm = hamilton_planes(hamilton_planes(e, win),
                                                    vc) - \
                                hamilton_planes(hamilton_planes(v, win), e)
                            axis_grad[m] += eff[wa, wb] * s_half * float(
                                np.sum(dot_planes(delta, dterm)))
                    # input gradient: conj(w) delta w / clamped scale
                    tgt = d_pad[:, :,
                                a:a + (oh - 1) * spec.stride[0] + 1:spec.stride[0],
                                b:b + (ow - 1) * spec.stride[1] + 1:spec.stride[1],
                                cidx]
                    tgt += eff[wa, wb] * hamilton_planes(
                        hamilton_planes(vc, delta), v)
            if u_axis is not None:
                # chain through the normalization of the raw axis vector
                proj = (np.eye(3) - np.outer(unit, unit)) / axis_norm
                u_axis[key] += proj @ axis_grad
        updates = {"scale": u_scale, "angle": u_angle}
        if u_axis is not None:
            updates["axis"] = u_axis
        if self.bias is not None:
            updates["bias"] = d_top.sum(axis=(1, 2, 3))
        ph, pw = spec.padding
        h, w = cache["in_shape"][2], cache["in_shape"][3]
        d_bottom = d_pad[:, :, ph:ph + h, pw:pw + w, :]
        return d_bottom, updates

    def branch_signature(self, cache):
        # the scale clamp is a branch; init keeps |scale| well above it
        return (np.abs(self.scale) >= SCALE_FLOOR).copy()


class EquivariantConv(Layer):
    """Real-kernel convolution applied identically to all components."""

    name = "conv_equivariant"
    _array_attrs = ("kernel",)

    def __init__(self, in_channels: int, n_kernels: int, spec: ConvSpec,
                 seed: int = 0, dtype=np.float64):
        if spec.kernel_extent < 1:
            raise ShapeError("ConvSpec.kernel_extent must be set for layers")
        self.spec = spec
        self.in_channels = in_channels
        extent = spec.kernel_extent
        if spec.channel_scheme == "summed":
            shape = (n_kernels, in_channels, extent, extent)
        elif spec.channel_scheme == "autoencoder":
            n_kernels = in_channels
            shape = (n_kernels, extent, extent)
        else:
            shape = (n_kernels, extent, extent)
        self.n_kernels = n_kernels
        self.n_out = scheme_output_channels(spec.channel_scheme, n_kernels,
                                            in_channels)
        fan_in = in_channels * extent * extent
        fan_out = self.n_out * extent * extent
        rng = make_generator(seed)
        self.kernel = glorot_uniform(rng, shape, fan_in, fan_out).astype(dtype)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(
                f"{self.name} needs (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"{self.name} expects {self.in_channels} channels, got {c}")
        s = self.spec
        return (out_extent(h, s.kernel_extent, s.stride[0], s.padding[0]),
                out_extent(w, s.kernel_extent, s.stride[1], s.padding[1]),
                self.n_out)

    def params(self):
        return [Param("kernel", self.kernel, quaternion=False)]

    def _tap(self, kidx: int, cidx: int) -> np.ndarray:
        if self.spec.channel_scheme == "summed":
            return self.kernel[kidx, cidx]
        return self.kernel[kidx]

    def forward(self, x, training=False, update_running=False, frozen=None):
        spec = self.spec
        padded = _pad_batch(x, spec.padding)
        slots = [None] * self.n_out
        for kidx, cidx, oidx in scheme_pairs(spec.channel_scheme,
                                             self.n_kernels,
                                             self.in_channels):
            contrib = pair_conv_equivariant(self._tap(kidx, cidx),
                                            padded[..., cidx], spec.stride,
                                            spec.flip_kernel)
            slots[oidx] = contrib if slots[oidx] is None \
                else slots[oidx] + contrib
        return np.stack(slots, axis=-1), {"padded": padded,
                                          "in_shape": x.shape}

    def backward(self, d_top, cache):
        spec = self.spec
        padded = cache["padded"]
        extent = spec.kernel_extent
        oh, ow = d_top.shape[2], d_top.shape[3]
        d_pad = np.zeros_like(padded)
        u_k = np.zeros_like(self.kernel)
        for kidx, cidx, oidx in scheme_pairs(spec.channel_scheme,
                                             self.n_kernels,
                                             self.in_channels):
            delta = d_top[..., oidx]
            chan = padded[..., cidx]
            kslice = ((kidx, cidx) if spec.channel_scheme == "summed"
                      else (kidx,))
            for a in range(extent):
                for b in range(extent):
                    wa, wb = _tap_index(a, b, extent, spec.flip_kernel)
                    win = _tap_slice(chan, a, b, oh, ow, spec.stride)
                    u_k[kslice + (wa, wb)] += float(
                        np.sum(dot_planes(delta, win)))
                    tgt = d_pad[:, :,
                                a:a + (oh - 1) * spec.stride[0] + 1:spec.stride[0],
                                b:b + (ow - 1) * spec.stride[1] + 1:spec.stride[1],
                                cidx]
                    tgt += self._tap(kidx, cidx)[wa, wb] * delta
        ph, pw = spec.padding
        h, w = cache["in_shape"][2], cache["in_shape"][3]
        d_bottom = d_pad[:, :, ph:ph + h, pw:pw + w, :]
        return d_bottom, {"kernel": u_k}


# ---------------------------------------------------------------------------
# Fully connected layers.
# ---------------------------------------------------------------------------

class DenseClassic(Layer):
    """Classic fully connected layer over the flattened input."""

    name = "fc_classic"
    _array_attrs = ("weights", "bias")

    def __init__(self, in_shape: tuple[int, ...], units: int, seed: int = 0,
                 bias: bool = True, dtype=np.float64,
                 init_mode: str = "quaternion_normalized"):
        self.in_shape = tuple(in_shape)
        self.units = units
        n = int(np.prod(self.in_shape))
        ispec = InitSpec(init_mode, n, units, seed)
        self.weights = init_classic_planes(ispec, (units, n), dtype=dtype)
        self.bias = np.zeros((4, units), dtype=dtype) if bias else None

    def out_shape(self, in_shape):
        if tuple(in_shape) != self.in_shape:
            raise ShapeError(
                f"{self.name} expects input {self.in_shape}, got {in_shape}")
        return (self.units,)

    def params(self):
        out = [Param("weights", self.weights)]
        if self.bias is not None:
            out.append(Param("bias", self.bias))
        return out

    def forward(self, x, training=False, update_running=False, frozen=None):
        flat = x.reshape(4, x.shape[1], -1)
        out = hamilton_contract(self.weights, flat, "un,bn->bu")
        if self.bias is not None:
            out = out + self.bias[:, None, :]
        return out, {"flat": flat, "in_shape": x.shape}

    def backward(self, d_top, cache):
        flat = cache["flat"]
        u_w = hamilton_contract(d_top, conjugate_planes(flat), "bu,bn->un")
        d_x = hamilton_contract(conjugate_planes(self.weights), d_top,
                                "un,bu->bn")
        updates = {"weights": u_w}
        if self.bias is not None:
            updates["bias"] = d_top.sum(axis=1)
        return d_x.reshape(cache["in_shape"]), updates


class DenseGeometric(Layer):
    """Geometric fully connected layer: norm-scaled sandwich per element."""

    name = "fc_geometric"
    _array_attrs = ("weights", "bias")

    def __init__(self, in_shape: tuple[int, ...], units: int, seed: int = 0,
                 bias: bool = False, dtype=np.float64):
        self.in_shape = tuple(in_shape)
        self.units = units
        n = int(np.prod(self.in_shape))
        ispec = InitSpec("quaternion_normalized", n, units, seed)
        self.weights = init_classic_planes(ispec, (units, n), dtype=dtype)
        self.bias = np.zeros((4, units), dtype=dtype) if bias else None

    def out_shape(self, in_shape):
        if tuple(in_shape) != self.in_shape:
            raise ShapeError(
                f"{self.name} expects input {self.in_shape}, got {in_shape}")
        return (self.units,)

    def params(self):
        out = [Param("weights", self.weights)]
        if self.bias is not None:
            out.append(Param("bias", self.bias))
        return out

    def _norms(self) -> tuple[np.ndarray, np.ndarray]:
        norms = np.sqrt(np.sum(self.weights * self.weights, axis=0))
        return np.maximum(norms, NORM_FLOOR), norms >= NORM_FLOOR

    def forward(self, x, training=False, update_running=False, frozen=None):
        flat = x.reshape(4, x.shape[1], -1)           # (4, B, N)
        w = self.weights[:, None, :, :]               # (4, 1, U, N)
        xb = flat[:, :, None, :]                      # (4, B, 1, N)
        clamped, _ = self._norms()
        rot = hamilton_planes(hamilton_planes(w, xb), conjugate_planes(w))
        out = np.sum(rot / clamped, axis=3)           # (4, B, U)
        if self.bias is not None:
            out = out + self.bias[:, None, :]
        return out, {"flat": flat, "in_shape": x.shape}

    def backward(self, d_top, cache):
        flat = cache["flat"]
        w = self.weights[:, None, :, :]               # (4, 1, U, N)
        xb = flat[:, :, None, :]                      # (4, B, 1, N)
        d = d_top[:, :, :, None]                      # (4, B, U, 1)
        clamped, unclamped = self._norms()
        wc = conjugate_planes(w)
        # exact gradient of sum_n w x conj(w) / max(||w||, floor)
        t1 = hamilton_planes(hamilton_planes(d, w), conjugate_planes(xb))
        t2 = hamilton_planes(hamilton_planes(conjugate_planes(d), w), xb)
        rot = hamilton_planes(hamilton_planes(w, xb), wc)
        dots = dot_planes(d, rot)                     # (B, U, N)
        u_w = np.sum((t1 + t2) / clamped, axis=1)
        norm_term = np.sum(dots, axis=0) / (clamped ** 3)  # (U, N)
        u_w -= np.where(unclamped, norm_term, 0.0) * self.weights
        d_x = np.sum(hamilton_planes(hamilton_planes(wc, d), w) / clamped,
                     axis=2)                          # (4, B, N)
        updates = {"weights": u_w}
        if self.bias is not None:
            updates["bias"] = d_top.sum(axis=1)
        return d_x.reshape(cache["in_shape"]), updates

    def branch_signature(self, cache):
        return (np.sqrt(np.sum(self.weights * self.weights, axis=0))
                >= NORM_FLOOR).copy()


# ---------------------------------------------------------------------------
# Activations.
# ---------------------------------------------------------------------------

class SplitActivation(Layer):
    """Componentwise real activation; alpha is learnable for prelu."""

    name = "act_split"
    _array_attrs = ("alpha",)

    def __init__(self, fn: str, alpha: float | None = None,
                 dtype=np.float64):
        self.fn = fn
        if fn == "prelu":
            self.alpha = np.array([0.25 if alpha is None else alpha],
                                  dtype=dtype)
        else:
            self.alpha = None
            self.fixed_alpha = alpha

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def params(self):
        if self.alpha is not None:
            return [Param("alpha", self.alpha, quaternion=False)]
        return []

    def _alpha_value(self):
        if self.alpha is not None:
            return float(self.alpha[0])
        return getattr(self, "fixed_alpha", None)

    def forward(self, x, training=False, update_running=False, frozen=None):
        return split_apply(self.fn, x, self._alpha_value()), {"x": x}

    def backward(self, d_top, cache):
        x = cache["x"]
        d_bottom = d_top * split_derivative(self.fn, x, self._alpha_value())
        updates = {}
        if self.alpha is not None:
            mask = x <= 0.0
            updates["alpha"] = np.array([float(np.sum(d_top * x * mask))],
                                        dtype=x.dtype)
        return d_bottom, updates

    def branch_signature(self, cache):
        return split_branch(self.fn, cache["x"])


class REReLU(Layer):
    """Rotation-equivariant ReLU over each sample's full feature set.

    The reference magnitude c is the mean magnitude over the sample; the
    backward treats c as a constant (stop-gradient), matching the frozen
    constant handed to finite-difference checks.
    """

    name = "act_rerelu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, training=False, update_running=False, frozen=None):
        mags = magnitude_planes(x)                    # (B, ...)
        flat = mags.reshape(mags.shape[0], -1)
        if frozen is not None:
            c = frozen
        else:
            c = flat.mean(axis=1)                     # (B,)
        cb = c.reshape((-1,) + (1,) * (mags.ndim - 1))
        denom = np.maximum(mags, cb)
        factor = np.divide(mags, denom, out=np.zeros_like(mags),
                           where=denom > 0)
        return x * factor, {"x": x, "mags": mags, "c": c, "cb": cb}

    def backward(self, d_top, cache):
        x, mags, cb = cache["x"], cache["mags"], cache["cb"]
        passing = mags >= cb
        safe_m = np.where(mags > 0, mags, 1.0)
        safe_c = np.where(cb > 0, cb, 1.0)
        proj = dot_planes(d_top, x)
        shrunk = (d_top * mags + x * (proj / safe_m)) / safe_c
        shrunk = np.where(mags > 0, shrunk, 0.0)
        d_bottom = np.where(passing, d_top, shrunk)
        return d_bottom, {}

    def frozen_constants(self, cache):
        return cache["c"].copy()

    def branch_signature(self, cache):
        return (cache["mags"] >= cache["cb"]).copy()


# ---------------------------------------------------------------------------
# Pooling.
# ---------------------------------------------------------------------------

class SplitPool(Layer):
    """Channel-wise max or average pooling with argmax gradient routing."""

    name = "pool_split"

    def __init__(self, kind: str, window: tuple[int, int],
                 stride: tuple[int, int] | None = None):
        if kind not in ("max", "avg"):
            raise ShapeError(f"split pool kind must be max or avg, got {kind}")
        self.kind = kind
        self.window = window
        self.stride = stride or window

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(
                f"{self.name} needs (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        return (out_extent(h, self.window[0], self.stride[0], 0),
                out_extent(w, self.window[1], self.stride[1], 0),
                c)

    def _iter_windows(self, x):
        wh, ww = self.window
        sh, sw = self.stride
        oh = out_extent(x.shape[2], wh, sh, 0)
        ow = out_extent(x.shape[3], ww, sw, 0)
        for py in range(oh):
            for px in range(ow):
                y0, x0 = py * sh, px * sw
                yield py, px, x[:, :, y0:y0 + wh, x0:x0 + ww, :]

    def forward(self, x, training=False, update_running=False, frozen=None):
        wh, ww = self.window
        oh = out_extent(x.shape[2], wh, self.stride[0], 0)
        ow = out_extent(x.shape[3], ww, self.stride[1], 0)
        out = np.empty((4, x.shape[1], oh, ow, x.shape[4]), dtype=x.dtype)
        argmax = (np.empty((4, x.shape[1], oh, ow, x.shape[4]), dtype=np.int64)
                  if self.kind == "max" else None)
        for py, px, win in self._iter_windows(x):
            flat = win.reshape(4, x.shape[1], wh * ww, x.shape[4])
            if self.kind == "max":
                idx = flat.argmax(axis=2)
                out[:, :, py, px, :] = np.take_along_axis(
                    flat, idx[:, :, None, :], axis=2)[:, :, 0, :]
                argmax[:, :, py, px, :] = idx
            else:
                out[:, :, py, px, :] = flat.mean(axis=2)
        return out, {"in_shape": x.shape, "argmax": argmax}

    def backward(self, d_top, cache):
        x_shape = cache["in_shape"]
        wh, ww = self.window
        sh, sw = self.stride
        b, ch = x_shape[1], x_shape[4]
        d_bottom = np.zeros(x_shape, dtype=d_top.dtype)
        oh, ow = d_top.shape[2], d_top.shape[3]
        comp = np.arange(4)[:, None, None]
        batch = np.arange(b)[None, :, None]
        chan = np.arange(ch)[None, None, :]
        for py in range(oh):
            for px in range(ow):
                y0, x0 = py * sh, px * sw
                if self.kind == "max":
                    idx = cache["argmax"][:, :, py, px, :]       # (4, B, C)
                    np.add.at(d_bottom,
                              (comp, batch, y0 + idx // ww, x0 + idx % ww,
                               chan),
                              d_top[:, :, py, px, :])
                else:
                    d_bottom[:, :, y0:y0 + wh, x0:x0 + ww, :] += \
                        (d_top[:, :, py, px, :] /
                         (wh * ww))[:, :, None, None, :]
        return d_bottom, {}

    def branch_signature(self, cache):
        if self.kind == "max":
            return cache["argmax"].copy()
        return None


class MagnitudePool(Layer):
    """Select the whole quaternion of maximum amplitude per window.

    Near-ties (within the magnitude tolerance) are broken by cosine
    similarity against the window's component-wise mean, then by scan
    order; the selected position receives the whole upstream gradient.
    """

    name = "pool_fully"

    def __init__(self, window: tuple[int, int],
                 stride: tuple[int, int] | None = None):
        self.window = window
        self.stride = stride or window

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(
                f"{self.name} needs (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        return (out_extent(h, self.window[0], self.stride[0], 0),
                out_extent(w, self.window[1], self.stride[1], 0),
                c)

    def forward(self, x, training=False, update_running=False, frozen=None):
        from .qlayers import POOL_TIE_TOL
        wh, ww = self.window
        sh, sw = self.stride
        b, ch = x.shape[1], x.shape[4]
        oh = out_extent(x.shape[2], wh, sh, 0)
        ow = out_extent(x.shape[3], ww, sw, 0)
        out = np.empty((4, b, oh, ow, ch), dtype=x.dtype)
        sel = np.empty((b, oh, ow, ch), dtype=np.int64)
        for py in range(oh):
            for px in range(ow):
                y0, x0 = py * sh, px * sw
                win = x[:, :, y0:y0 + wh, x0:x0 + ww, :]
                flat = win.reshape(4, b, wh * ww, ch)
                mags = magnitude_planes(flat)                # (B, n, C)
                idx = mags.argmax(axis=1)                    # (B, C)
                top = np.take_along_axis(mags, idx[:, None, :], axis=1)
                ties = (mags >= top - POOL_TIE_TOL).sum(axis=1) > 1
                if np.any(ties):
                    for bb, cc in zip(*np.nonzero(ties)):
                        idx[bb, cc] = fully_pool_select(flat[:, bb, :, cc])
                out[:, :, py, px, :] = np.take_along_axis(
                    flat, idx[None, :, None, :], axis=2)[:, :, 0, :]
                sel[:, py, px, :] = idx
        return out, {"in_shape": x.shape, "selected": sel}

    def backward(self, d_top, cache):
        x_shape = cache["in_shape"]
        wh, ww = self.window
        sh, sw = self.stride
        b, ch = x_shape[1], x_shape[4]
        d_bottom = np.zeros(x_shape, dtype=d_top.dtype)
        oh, ow = d_top.shape[2], d_top.shape[3]
        comp = np.arange(4)[:, None, None]
        batch = np.arange(b)[None, :, None]
        chan = np.arange(ch)[None, None, :]
        for py in range(oh):
            for px in range(ow):
                y0, x0 = py * sh, px * sw
                idx = cache["selected"][:, py, px, :][None]   # (1, B, C)
                np.add.at(d_bottom,
                          (comp, batch, y0 + idx // ww, x0 + idx % ww,
                           chan),
                          d_top[:, :, py, px, :])
        return d_bottom, {}

    def branch_signature(self, cache):
        return cache["selected"].copy()


# ---------------------------------------------------------------------------
# Normalization layers.
# ---------------------------------------------------------------------------

class WQBN(Layer):
    """Whitening batch norm layer.

    The backward treats the batch statistics (mean and Cholesky factor)
    as constants; gradients for the symmetric scale and the shift are
    exact.  Finite-difference checks receive the same frozen statistics.
    """

    name = "norm_wqbn"

    def __init__(self, channels: int, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float64):
        self.state = BNState.wqbn(channels, eps, momentum)
        self.astype(dtype)

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def params(self):
        return [Param("gamma_tri", self.state.gamma_tri, quaternion=False),
                Param("beta", self.state.beta)]

    def buffers(self):
        return [Param("running_mean", self.state.running_mean,
                      quaternion=False),
                Param("running_cov", self.state.running_cov,
                      quaternion=False)]

    def astype(self, dtype):
        s = self.state
        s.gamma_tri = s.gamma_tri.astype(dtype)
        s.beta = s.beta.astype(dtype)
        s.running_mean = s.running_mean.astype(dtype)
        s.running_cov = s.running_cov.astype(dtype)

    def apply_updates(self, updates, lr):
        self.state.gamma_tri += lr * updates["gamma_tri"]
        self.state.beta += lr * updates["beta"]

    def forward(self, x, training=False, update_running=False, frozen=None):
        out, cache = wqbn_forward(self.state, QTensor(x), training,
                                  update_running, frozen=frozen)
        return out.planes, cache

    def backward(self, d_top, cache):
        s = self.state
        d = d_top.reshape(4, -1, s.channels)
        whitened = cache["whitened"]
        d_bottom = np.empty_like(d)
        u_tri = np.zeros_like(s.gamma_tri)
        u_beta = d.sum(axis=1)
        from .qlayers import TRI_INDICES
        for c in range(s.channels):
            gamma = tri_to_symmetric(s.gamma_tri[c])
            dc = d[:, :, c]
            full = dc @ whitened[:, :, c].T          # (4, 4)
            for n, (a, b) in enumerate(TRI_INDICES):
                u_tri[c, n] = full[a, b] if a == b else full[a, b] + full[b, a]
            d_bottom[:, :, c] = np.linalg.solve(cache["chols"][c].T,
                                                gamma.T @ dc)
        return d_bottom.reshape(d_top.shape), {"gamma_tri": u_tri,
                                               "beta": u_beta}

    def frozen_constants(self, cache):
        return (cache["means"].copy(), cache["chols"].copy())


class VQBN(Layer):
    """Variance batch norm layer with exact gradients through the stats."""

    name = "norm_vqbn"

    def __init__(self, channels: int, eps: float = 1e-5,
                 momentum: float = 0.1, linear_variance: bool = False,
                 dtype=np.float64):
        self.state = BNState.vqbn(channels, eps, momentum, linear_variance)
        self.astype(dtype)

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def params(self):
        return [Param("gamma", self.state.gamma, quaternion=False),
                Param("beta", self.state.beta)]

    def buffers(self):
        return [Param("running_mean", self.state.running_mean,
                      quaternion=False),
                Param("running_var", self.state.running_var,
                      quaternion=False)]

    def astype(self, dtype):
        s = self.state
        s.gamma = s.gamma.astype(dtype)
        s.beta = s.beta.astype(dtype)
        s.running_mean = s.running_mean.astype(dtype)
        s.running_var = s.running_var.astype(dtype)

    def apply_updates(self, updates, lr):
        self.state.gamma += lr * updates["gamma"]
        self.state.beta += lr * updates["beta"]

    def forward(self, x, training=False, update_running=False, frozen=None):
        out, cache = vqbn_forward(self.state, QTensor(x), training,
                                  update_running)
        return out.planes, cache

    def backward(self, d_top, cache):
        s = self.state
        d = d_top.reshape(4, -1, s.channels)
        v = cache["centered"]
        var, denom = cache["var"], cache["denom"]
        t = d.shape[1]
        u_gamma = np.sum(dot_planes(d, v / denom), axis=0)
        u_beta = d.sum(axis=1)
        if cache["training"]:
            d_mean = d.mean(axis=1)
            dots = np.sum(dot_planes(d, v), axis=0)       # (C,)
            if s.linear_variance:
                stat = dots / (t * denom ** 3)
            else:
                stat = 2.0 * var * dots / (t * denom ** 3)
            d_bottom = s.gamma * ((d - d_mean[:, None, :]) / denom
                                  - stat * v)
        else:
            d_bottom = s.gamma * d / denom
        return d_bottom.reshape(d_top.shape), {"gamma": u_gamma,
                                               "beta": u_beta}


class RQBN(Layer):
    """Rotation-equivariant batch norm; exact gradient, no learnables."""

    name = "norm_rqbn"

    def __init__(self, channels: int, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float64):
        self.state = BNState.rqbn(channels, eps, momentum)
        self.astype(dtype)

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def buffers(self):
        return [Param("running_sqnorm", self.state.running_sqnorm,
                      quaternion=False)]

    def astype(self, dtype):
        self.state.running_sqnorm = self.state.running_sqnorm.astype(dtype)

    def apply_updates(self, updates, lr):
        pass

    def forward(self, x, training=False, update_running=False, frozen=None):
        out, cache = rqbn_forward(self.state, QTensor(x), training,
                                  update_running)
        return out.planes, cache

    def backward(self, d_top, cache):
        s = self.state
        d = d_top.reshape(4, -1, s.channels)
        x, scale = cache["x"], cache["scale"]
        if cache["training"]:
            t = d.shape[1]
            dots = np.sum(dot_planes(d, x), axis=0)       # (C,)
            d_bottom = d / scale - x * (dots / (t * scale ** 3))
        else:
            d_bottom = d / scale
        return d_bottom.reshape(d_top.shape), {}


# ---------------------------------------------------------------------------
# Network container.
# ---------------------------------------------------------------------------

class Network:
    """Ordered layers with validated shapes and layer-local backward."""

    def __init__(self, layers: Sequence[Layer],
                 input_shape: tuple[int, ...]):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = [self.input_shape]
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
            self.shapes.append(tuple(shape))

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def forward(self, x: np.ndarray, training: bool = False,
                update_running: bool = False, frozen: dict | None = None,
                with_caches: bool = False):
        """Run the batch (planes (4, B, *input_shape)) through all layers.

        Returns (output planes, caches or None).  ``frozen`` maps layer
        index to that layer's frozen constants.
        """
        if x.shape[0] != 4 or x.shape[2:] != self.input_shape:
            raise ShapeError(
                f"batch shape {x.shape} does not match input "
                f"{self.input_shape}")
        caches = [] if (with_caches or training) else None
        for n, layer in enumerate(self.layers):
            layer_frozen = frozen.get(n) if frozen else None
            x, cache = layer.forward(x, training=training,
                                     update_running=update_running,
                                     frozen=layer_frozen)
            if caches is not None:
                caches.append(cache)
        return x, caches

    def backward(self, d_top: np.ndarray, caches) -> tuple[list[dict],
                                                           np.ndarray]:
        """Propagate the error down; returns per-layer updates, input error."""
        updates: list[dict] = [None] * len(self.layers)
        d = d_top
        for n in range(len(self.layers) - 1, -1, -1):
            d, upd = self.layers[n].backward(d, caches[n])
            updates[n] = upd
        return updates, d

    def apply_updates(self, updates: Sequence[dict], lr: float) -> None:
        for layer, upd in zip(self.layers, updates):
            if upd:
                layer.apply_updates(upd, lr)
            else:
                layer._post_step()

    def parameters(self):
        for n, layer in enumerate(self.layers):
            for p in layer.params():
                yield n, layer, p

    def state_items(self):
        """(name, array, quaternion flag) for params and buffers."""
        for n, layer in enumerate(self.layers):
            for p in layer.params():
                yield f"layer{n:02d}.{layer.name}.{p.name}", p.array, \
                    p.quaternion
            for p in layer.buffers():
                yield f"layer{n:02d}.{layer.name}.buffer.{p.name}", \
                    p.array, p.quaternion

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        names = [name for name, _, _ in self.state_items()]
        if set(names) != set(arrays):
            missing = sorted(set(names) - set(arrays))
            extra = sorted(set(arrays) - set(names))
            raise CheckpointMismatchError(
                f"checkpoint does not match the model (missing {missing}, "
                f"unexpected {extra})")
        for name, array, _ in self.state_items():
            incoming = arrays[name]
            if incoming.shape != array.shape:
                raise CheckpointMismatchError(
                    f"{name}: checkpoint shape {incoming.shape} != model "
                    f"shape {array.shape}")
            array[...] = incoming.astype(array.dtype)

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def copy_state(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr, _ in self.state_items()}

    def restore_state(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, arr, _ in self.state_items():
            arr[...] = snapshot[name]

    def parameter_count(self) -> int:
        return sum(p.array.size for _, _, p in self.parameters())


def stack_batch(samples: Sequence[QTensor], dtype=None) -> np.ndarray:
    """Stack sample tensors into batch planes (4, B, *shape)."""
    if not samples:
        raise ShapeError("cannot stack an empty batch")
    planes = np.stack([s.planes for s in samples], axis=1)
    if dtype is not None:
        planes = planes.astype(dtype)
    return planes
