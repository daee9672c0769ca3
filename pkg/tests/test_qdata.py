"""Real-to-quaternion mappings, the synthetic task, dataset IO."""

import numpy as np
import pytest

from quatnet.errors import DatasetError, ShapeError
from quatnet.qcore import Quaternion, sandwich_planes, versor
from quatnet.qdata import (
    Dataset,
    load_dataset,
    map_derivative_stack,
    map_grayscale,
    map_pointcloud,
    map_rgb,
    nearest_prototype_accuracy,
    save_dataset,
    synth_pattern,
    synth_prototypes,
)
from quatnet.qtensor import QTensor

from conftest import random_versor


class TestRGBMapping:
    def test_black_image_is_zero(self):
        t = map_rgb(np.zeros((4, 4, 3)))
        assert t.shape == (4, 4, 1)
        assert not np.any(t.planes)

    def test_red_pixel_is_i(self):
        img = np.zeros((1, 1, 3))
        img[0, 0, 0] = 1.0
        assert map_rgb(img).quaternion_at((0, 0, 0)) == Quaternion(0, 1, 0, 0)

    def test_real_plane_always_zero(self, rng):
        t = map_rgb(rng.random((5, 6, 3)))
        assert not np.any(t.r)

    def test_integer_images_scaled(self):
        img = np.full((1, 1, 3), 255, dtype=np.uint8)
        t = map_rgb(img)
        assert t.quaternion_at((0, 0, 0)).isclose(Quaternion(0, 1, 1, 1))

    def test_linear_and_injective(self, rng):
        a, b = rng.random((3, 3, 3)), rng.random((3, 3, 3))
        lhs = map_rgb(a + b).planes
        assert np.allclose(lhs, map_rgb(a).planes + map_rgb(b).planes)
        assert not np.allclose(map_rgb(a).planes, map_rgb(b).planes)

    def test_wrong_channels_rejected(self):
        with pytest.raises(ShapeError):
            map_rgb(np.zeros((2, 2, 4)))


class TestGrayscaleMapping:
    def test_zero_image(self):
        assert not np.any(map_grayscale(np.zeros((3, 3))).planes)

    def test_half_gray(self):
        t = map_grayscale(np.full((1, 1), 0.5))
        assert t.quaternion_at((0, 0, 0)) == Quaternion(0.5, 0, 0, 0)

    def test_imaginary_planes_zero(self, rng):
        t = map_grayscale(rng.random((4, 5)))
        assert not np.any(t.planes[1:])


class TestPointCloudMapping:
    def test_origin_is_zero(self):
        t = map_pointcloud(np.zeros((1, 3)))
        assert t.quaternion_at((0, 0)) == Quaternion()

    def test_coordinates_to_imaginaries(self):
        t = map_pointcloud(np.array([[1.0, 2.0, 3.0]]))
        assert t.quaternion_at((0, 0)) == Quaternion(0, 1, 2, 3)

    def test_rotation_intertwines_with_sandwich(self, rng):
        # rotating points in 3D equals sandwich-rotating the mapped tensor
        points = rng.standard_normal((10, 3))
        angle = rng.uniform(-np.pi, np.pi)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        w = versor(angle / 2.0, axis)
        mapped = map_pointcloud(points)
        rotated_tensor = sandwich_planes(
            w.as_array()[:, None, None], mapped.planes)
        # rotation matrix from the same versor
        r, i, j, k = w.as_array()
        rot = np.array([
            [1 - 2 * (j * j + k * k), 2 * (i * j - r * k), 2 * (i * k + r * j)],
            [2 * (i * j + r * k), 1 - 2 * (i * i + k * k), 2 * (j * k - r * i)],
            [2 * (i * k - r * j), 2 * (j * k + r * i), 1 - 2 * (i * i + j * j)],
        ])
        expect = map_pointcloud(points @ rot.T)
        assert np.allclose(rotated_tensor, expect.planes, atol=1e-10)


class TestDerivativeStack:
    def test_constant_series(self):
        t = map_derivative_stack(np.full((5, 3), 2.0))
        assert np.allclose(t.i, 2.0)
        assert not np.any(t.j) and not np.any(t.k)

    def test_linear_ramp(self):
        series = np.outer(np.arange(6.0), np.ones(2)) * 0.5
        t = map_derivative_stack(series)
        assert np.allclose(t.j, 0.5)   # constant first derivative
        assert np.allclose(t.k, 0.0)   # zero second derivative

    def test_output_shape(self, rng):
        t = map_derivative_stack(rng.random((7, 4)))
        assert t.shape == (7, 4, 1)
        assert not np.any(t.r)

    def test_too_short_rejected(self):
        with pytest.raises(ShapeError):
            map_derivative_stack(np.zeros((2, 3)))


class TestSynthPattern:
    def test_no_noise_no_rotation_equals_prototypes(self):
        data = synth_pattern(5, 8, 0.0, rotate=False)
        protos = synth_prototypes(5)
        for n, (tensor, label) in enumerate(data.samples):
            assert label == n % 4
            assert np.array_equal(tensor.planes, protos[label].planes)

    def test_fixed_seed_reproducible(self):
        a = synth_pattern(9, 16, 0.05)
        b = synth_pattern(9, 16, 0.05)
        for (ta, la), (tb, lb) in zip(a.samples, b.samples):
            assert la == lb and np.array_equal(ta.planes, tb.planes)

    def test_sample_seed_gives_heldout_draw(self):
        a = synth_pattern(9, 8, 0.05)
        b = synth_pattern(9, 8, 0.05, sample_seed=1234)
        assert not np.array_equal(a.samples[0][0].planes,
                                  b.samples[0][0].planes)

    def test_nearest_prototype_is_perfect_noiseless(self):
        data = synth_pattern(7, 40, 0.0)
        assert nearest_prototype_accuracy(data, 7) == 1.0

    def test_rotation_preserves_magnitudes(self):
        data = synth_pattern(3, 4, 0.0)
        protos = synth_prototypes(3)
        for tensor, label in data.samples:
            assert np.allclose(tensor.magnitudes(),
                               protos[label].magnitudes(), atol=1e-10)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        data = synth_pattern(2, 6, 0.05)
        manifest = save_dataset(data, tmp_path / "train")
        back = load_dataset(manifest, n_classes=4)
        assert len(back) == 6 and back.n_classes == 4
        for (ta, la), (tb, lb) in zip(data.samples, back.samples):
            assert la == lb
            assert np.allclose(ta.planes, tb.planes, atol=1e-6)  # f32 file

    def test_manifest_is_lf_terminated_utf8(self, tmp_path):
        manifest = save_dataset(synth_pattern(2, 2, 0.0), tmp_path / "d")
        raw = manifest.read_bytes()
        assert raw.endswith(b"\n") and b"\r" not in raw
        assert b"\t" in raw

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nope.txt")

    def test_bad_label_line(self, tmp_path):
        d = tmp_path / "d"
        save_dataset(synth_pattern(2, 2, 0.0), d)
        manifest = d / "manifest.txt"
        manifest.write_text("sample_00000.qt\tnotanumber\n")
        with pytest.raises(DatasetError):
            load_dataset(manifest)

    def test_missing_sample_file(self, tmp_path):
        d = tmp_path / "d"
        manifest = d
        d.mkdir()
        (d / "manifest.txt").write_text("ghost.qt\t0\n")
        with pytest.raises(DatasetError):
            load_dataset(d / "manifest.txt")

    def test_label_exceeding_declared_classes(self, tmp_path):
        d = tmp_path / "d"
        save_dataset(synth_pattern(2, 4, 0.0), d)
        with pytest.raises(DatasetError):
            load_dataset(d / "manifest.txt", n_classes=2)
