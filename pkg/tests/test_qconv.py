"""Convolution ops against scalar-interpreter and block-matrix oracles."""

import numpy as np
import pytest

from quatnet.errors import ShapeError
from quatnet.qcore import (
    I, J, K, ONE,
    Quaternion,
    conjugate,
    magnitude,
    sandwich,
    sandwich_planes,
    versor,
)
from quatnet.qconv import (
    ConvSpec,
    GeometricKernel,
    combine_autoencoder,
    combine_pyramidal,
    combine_summed,
    conv_left,
    conv_right,
    conv_twosided,
    layer_classic,
    layer_equivariant,
    layer_geometric,
    scheme_pairs,
)
from quatnet.qtensor import QTensor

from conftest import (
    block_conv_oracle,
    conv_oracle,
    random_qtensor,
    random_versor,
    tuples_tensor,
)


def single(q: Quaternion, shape=(1, 1)) -> QTensor:
    return QTensor.full_of(q, shape)


class TestConvLeft:
    def test_identity_kernel(self, rng):
        q = random_qtensor(rng, (4, 4))
        out = conv_left(single(ONE), q)
        assert out.allclose(q)

    def test_basis_product(self):
        out = conv_left(single(K), single(I, (1, 1)))
        assert out.quaternion_at((0, 0)) == J

    def test_matches_block_matrix_oracle(self, rng):
        for _ in range(20):
            w = random_qtensor(rng, (3, 3))
            q = random_qtensor(rng, (5, 5))
            out = conv_left(w, q)
            expect = block_conv_oracle(w, q)
            assert np.allclose(out.planes, expect, atol=1e-10)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ShapeError):
            conv_left(random_qtensor(rng, (2, 2)), random_qtensor(rng, (4, 4)))

    def test_kernel_larger_than_input_rejected(self, rng):
        with pytest.raises(ShapeError):
            conv_left(random_qtensor(rng, (5, 5)), random_qtensor(rng, (3, 3)))


class TestConvRight:
    def test_identity_kernel(self, rng):
        q = random_qtensor(rng, (3, 3))
        assert conv_right(q, single(ONE)).allclose(q)

    def test_order_reversal_flips_sign(self):
        # i * k = -j while k * i = +j
        out = conv_right(single(I, (1, 1)), single(K))
        assert out.quaternion_at((0, 0)) == -J

    def test_differs_from_left(self, rng):
        w = random_qtensor(rng, (3, 3))
        q = random_qtensor(rng, (5, 5))
        left = conv_left(w, q)
        right = conv_right(q, w)
        assert not np.allclose(left.planes, right.planes, atol=1e-8)


class TestConvTwosided:
    def test_identity_pair(self, rng):
        q = random_qtensor(rng, (3, 3))
        out = conv_twosided(single(ONE), q, single(ONE))
        assert out.allclose(q)

    def test_unit_pair_is_sandwich(self, rng):
        w = random_versor(rng)
        q = random_qtensor(rng, (3, 3))
        out = conv_twosided(single(w), q, single(conjugate(w)))
        expect = sandwich_planes(w.as_array()[:, None, None], q.planes)
        assert np.allclose(out.planes, expect, atol=1e-12)
        assert np.allclose(out.magnitudes(), q.magnitudes(), atol=1e-10)

    def test_extent_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            conv_twosided(random_qtensor(rng, (3, 3)),
                          random_qtensor(rng, (5, 5)),
                          random_qtensor(rng, (1, 1)))


class TestScalarOracle:
    """All three ops against the quadruple-loop interpreter."""

    @pytest.mark.parametrize("flip", [True, False])
    @pytest.mark.parametrize("stride,padding",
                             [((1, 1), (0, 0)), ((2, 2), (0, 0)),
                              ((1, 1), (1, 1)), ((2, 1), (1, 0))])
    def test_all_ops_match(self, rng, flip, stride, padding):
        spec = ConvSpec(stride=stride, padding=padding, flip_kernel=flip)
        for _ in range(5):
            ell = int(rng.choice([1, 3]))
            n = int(rng.integers(ell + 2, 8))
            w = random_qtensor(rng, (ell, ell))
            wr = random_qtensor(rng, (ell, ell))
            q = random_qtensor(rng, (n, n))
            for mode, got in (
                ("left", conv_left(w, q, spec)),
                ("right", conv_right(q, w, spec)),
                ("twosided", conv_twosided(w, q, wr, spec)),
            ):
                expect = conv_oracle(w, q, mode, kernel_right=wr,
                                     stride=stride, padding=padding,
                                     flip=flip)
                assert np.allclose(got.planes, tuples_tensor(expect).planes,
                                   atol=1e-10), (mode, flip, stride)

    def test_bitwise_identical_accumulation(self, rng):
        # same tap order, same expression shape: results match bit for bit
        w = random_qtensor(rng, (3, 3))
        q = random_qtensor(rng, (6, 6))
        got = conv_left(w, q, ConvSpec(flip_kernel=True))
        expect = tuples_tensor(conv_oracle(w, q, "left", flip=True))
        assert np.array_equal(got.planes, expect.planes)


class TestClassicLayer:
    def test_zero_params_zero_output(self, rng):
        q = random_qtensor(rng, (4, 4, 2))
        kernels = QTensor.zeros((2, 2, 3, 3))
        out = layer_classic(kernels, None, q,
                            ConvSpec(channel_scheme="summed"))
        assert not np.any(out.planes)
        assert out.shape == (2, 2, 2)

    def test_unit_kernel_passthrough(self, rng):
        q = random_qtensor(rng, (3, 3, 1))
        kernels = QTensor.zeros((1, 1, 1, 1))
        kernels.planes[0, 0, 0, 0, 0] = 1.0
        out = layer_classic(kernels, None, q,
                            ConvSpec(kernel_extent=1,
                                     channel_scheme="summed"))
        assert out.allclose(q)

    def test_summed_scheme_matches_hand_loop(self, rng):
        q = random_qtensor(rng, (5, 5, 2))
        kernels = random_qtensor(rng, (1, 2, 3, 3))
        spec = ConvSpec(channel_scheme="summed")
        out = layer_classic(kernels, None, q, spec)
        expect = conv_oracle(QTensor(kernels.planes[:, 0, 0]),
                             QTensor(q.planes[..., 0]), "left", flip=False)
        expect = expect + conv_oracle(QTensor(kernels.planes[:, 0, 1]),
                                      QTensor(q.planes[..., 1]), "left",
                                      flip=False)
        assert np.allclose(out.planes[..., 0], tuples_tensor(expect).planes,
                           atol=1e-10)

    def test_bias_added_per_channel(self, rng):
        q = random_qtensor(rng, (3, 3, 1))
        kernels = QTensor.zeros((2, 1, 1, 1))
        bias = [Quaternion(1, 0, 0, 0), Quaternion(0, 2, 0, 0)]
        out = layer_classic(kernels, bias, q,
                            ConvSpec(kernel_extent=1,
                                     channel_scheme="summed"))
        assert np.allclose(out.planes[0, ..., 0], 1.0)
        assert np.allclose(out.planes[1, ..., 1], 2.0)

    def test_orientation_right(self, rng):
        q = random_qtensor(rng, (4, 4, 1))
        kernels = random_qtensor(rng, (1, 1, 3, 3))
        spec = ConvSpec(channel_scheme="summed", orientation="right")
        out = layer_classic(kernels, None, q, spec)
        expect = conv_oracle(QTensor(kernels.planes[:, 0, 0]),
                             QTensor(q.planes[..., 0]), "right", flip=False)
        assert np.allclose(out.planes[..., 0], tuples_tensor(expect).planes,
                           atol=1e-10)

    def test_autoencoder_needs_matching_channels(self, rng):
        q = random_qtensor(rng, (4, 4, 2))
        kernels = random_qtensor(rng, (3, 1, 1))
        with pytest.raises(ShapeError):
            layer_classic(kernels, None, q,
                          ConvSpec(kernel_extent=1,
                                   channel_scheme="autoencoder"))


class TestGeometricLayer:
    def test_identity_versors_sum_pool(self, rng):
        # theta = 0, scale = 1: each tap contributes q itself
        q = random_qtensor(rng, (4, 4, 1))
        kern = GeometricKernel(scale=np.ones((1, 1, 3, 3)),
                               angle=np.zeros((1, 1, 3, 3)))
        out = layer_geometric(kern, q, ConvSpec(paradigm="geometric"))
        window_sum = np.zeros((4, 2, 2))
        for a in range(3):
            for b in range(3):
                window_sum += q.planes[:, a:a + 2, b:b + 2, 0]
        assert np.allclose(out.planes[..., 0], window_sum, atol=1e-10)

    def test_half_angle_rotation(self):
        # scale 1, angle pi about k: i maps to -i
        q = single(I, (1, 1))
        q = QTensor(q.planes[..., None])
        kern = GeometricKernel(scale=np.ones((1, 1, 1, 1)),
                               angle=np.full((1, 1, 1, 1), np.pi),
                               axis=np.array([0.0, 0.0, 1.0]))
        out = layer_geometric(kern, q,
                              ConvSpec(paradigm="geometric",
                                       kernel_extent=1))
        assert out.quaternion_at((0, 0, 0)).isclose(-I, abs_tol=1e-12)

    def test_matches_scalar_oracle(self, rng):
        # literal evaluation: w q conj(w) / scale per tap
        scale = rng.standard_normal((1, 1, 3, 3))
        angle = rng.uniform(-np.pi, np.pi, (1, 1, 3, 3))
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        kern = GeometricKernel(scale=scale, angle=angle, axis=axis)
        q = random_qtensor(rng, (5, 5, 1))
        out = layer_geometric(kern, q, ConvSpec(paradigm="geometric"))
        taps = kern.taps()[:, 0, 0]  # (4, 3, 3)
        w_tensor = QTensor(taps)
        expect_rot = conv_oracle_geometric(w_tensor, QTensor(
            q.planes[..., 0]), scale[0, 0])
        assert np.allclose(out.planes[..., 0], expect_rot, atol=1e-10)

    def test_tap_magnitude_equals_abs_scale(self, rng):
        scale = rng.standard_normal((2, 2))
        angle = rng.uniform(-np.pi, np.pi, (2, 2))
        kern = GeometricKernel(scale=scale, angle=angle)
        mags = np.sqrt((kern.taps() ** 2).sum(axis=0))
        assert np.allclose(mags, np.abs(scale), atol=1e-12)

    def test_biased_adds_threshold(self, rng):
        q = random_qtensor(rng, (2, 2, 1))
        kern = GeometricKernel(scale=np.ones((1, 1, 1, 1)),
                               angle=np.zeros((1, 1, 1, 1)),
                               bias=[Quaternion(0, 0, 5, 0)])
        spec = ConvSpec(paradigm="geometric_biased", kernel_extent=1)
        out = layer_geometric(kern, q, spec)
        assert np.allclose(out.planes[2], q.planes[2, ..., :] + 5.0)


def conv_oracle_geometric(w_tensor: QTensor, q: QTensor,
                          scale: np.ndarray) -> np.ndarray:
    """Naive literal loop for the geometric layer, planes (4, OH, OW)."""
    from conftest import qmul, qconj, qadd, tensor_tuples
    w = tensor_tuples(w_tensor)
    qq = tensor_tuples(q)
    ell = w.shape[0]
    oh = q.shape[0] - ell + 1
    ow = q.shape[1] - ell + 1
    out = np.zeros((oh, ow, 4))
    floor = 1e-8
    for x in range(oh):
        for y in range(ow):
            acc = (0.0, 0.0, 0.0, 0.0)
            for a in range(ell):
                for b in range(ell):
                    tap = tuple(w[a, b])
                    s = scale[a, b]
                    s = s if abs(s) >= floor else (floor if s >= 0 else -floor)
                    rot = qmul(qmul(tap, tuple(qq[x + a, y + b])), qconj(tap))
                    acc = qadd(acc, tuple(np.array(rot) / s))
            out[x, y] = acc
    return np.moveaxis(out, -1, 0)


class TestEquivariantLayer:
    def test_unit_scalar_identity(self, rng):
        q = random_qtensor(rng, (3, 3, 1))
        out = layer_equivariant(np.ones((1, 1, 1, 1)), q,
                                ConvSpec(paradigm="equivariant",
                                         kernel_extent=1))
        assert out.allclose(q)

    def test_scalar_two_scales(self, rng):
        q = random_qtensor(rng, (3, 3, 1))
        out = layer_equivariant(np.full((1, 1, 1, 1), 2.0), q,
                                ConvSpec(paradigm="equivariant",
                                         kernel_extent=1))
        assert np.allclose(out.planes, 2.0 * q.planes)

    def test_commutes_with_rotation(self, rng):
        kernel = rng.standard_normal((2, 1, 3, 3))
        spec = ConvSpec(paradigm="equivariant")
        for _ in range(20):
            q = random_qtensor(rng, (5, 5, 1))
            w = random_versor(rng).as_array()[:, None, None, None]
            rotated_in = QTensor(sandwich_planes(w, q.planes))
            lhs = layer_equivariant(kernel, rotated_in, spec)
            rhs = QTensor(sandwich_planes(
                w, layer_equivariant(kernel, q, spec).planes))
            assert np.allclose(lhs.planes, rhs.planes, atol=1e-10)


class TestChannelSchemes:
    def test_single_channel_identity_combination(self, rng):
        m = random_qtensor(rng, (2, 2))
        assert combine_autoencoder([m]).shape == (2, 2, 1)
        assert np.allclose(combine_summed([m]).planes[..., 0], m.planes)

    def test_pyramidal_index_order(self, rng):
        # C/4 = 2 inputs, K/4 = 3 kernels -> 6 outputs at index t*2 + s
        maps = [[random_qtensor(rng, (2, 2)) for _ in range(2)]
                for _ in range(3)]
        out = combine_pyramidal(maps)
        assert out.shape == (2, 2, 6)
        for t in range(3):
            for s in range(2):
                assert np.allclose(out.planes[..., t * 2 + s],
                                   maps[t][s].planes)

    def test_summed_scheme_scales_identical_outputs(self, rng):
        m = random_qtensor(rng, (3, 3))
        out = combine_summed([m, m, m])
        assert np.allclose(out.planes[..., 0], 3.0 * m.planes)

    def test_scheme_pairs_layouts(self):
        assert scheme_pairs("autoencoder", 2, 2) == [(0, 0, 0), (1, 1, 1)]
        assert scheme_pairs("pyramidal", 2, 2) == [
            (0, 0, 0), (0, 1, 1), (1, 0, 2), (1, 1, 3)]
        assert scheme_pairs("summed", 2, 2) == [
            (0, 0, 0), (0, 1, 0), (1, 0, 1), (1, 1, 1)]
        with pytest.raises(ShapeError):
            scheme_pairs("autoencoder", 1, 2)

    def test_layer_pyramidal_output_channels(self, rng):
        q = random_qtensor(rng, (4, 4, 2))
        kernels = random_qtensor(rng, (3, 1, 1))
        spec = ConvSpec(kernel_extent=1, channel_scheme="pyramidal")
        out = layer_classic(kernels, None, q, spec)
        assert out.shape == (4, 4, 6)
        # output t*C + s equals kernel t applied to channel s
        expect = conv_oracle(QTensor(kernels.planes[:, 2]),
                             QTensor(q.planes[..., 1]), "left", flip=False)
        assert np.allclose(out.planes[..., 2 * 2 + 1],
                           tuples_tensor(expect).planes, atol=1e-12)


class TestConvSpecValidation:
    def test_rejects_even_extent(self):
        with pytest.raises(ShapeError):
            ConvSpec(kernel_extent=4)

    def test_rejects_bad_stride(self):
        with pytest.raises(ShapeError):
            ConvSpec(stride=(0, 1))

    def test_rejects_unknown_paradigm(self):
        with pytest.raises(ShapeError):
            ConvSpec(paradigm="spectral")

    def test_output_extent_follows_valid_mode(self, rng):
        # output extent = N - L + 1 at stride 1 without padding
        for ell in (1, 3, 5):
            q = random_qtensor(rng, (9, 7))
            w = random_qtensor(rng, (ell, ell))
            out = conv_left(w, q)
            assert out.shape == (9 - ell + 1, 7 - ell + 1)
