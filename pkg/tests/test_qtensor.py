"""QTensor packing, windowing, and the QT1 file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quatnet.errors import CheckpointCorruptError, ShapeError
from quatnet.qcore import Quaternion
from quatnet.qtensor import (
    QTensor,
    load_qt,
    pack_channels,
    pad,
    save_qt,
    unpack_channels,
    window,
)


class TestPacking:
    def test_zero_image(self):
        t = pack_channels(np.zeros((3, 3, 4)))
        assert t.shape == (3, 3, 1)
        assert not np.any(t.planes)

    def test_definitional_layout(self):
        x = np.zeros((1, 1, 4))
        x[0, 0] = [1, 2, 3, 4]
        t = pack_channels(x)
        assert t.quaternion_at((0, 0, 0)) == Quaternion(1, 2, 3, 4)

    def test_two_channel_grouping(self):
        x = np.arange(8.0).reshape(1, 1, 8)
        t = pack_channels(x)
        assert t.shape == (1, 1, 2)
        assert t.quaternion_at((0, 0, 0)) == Quaternion(0, 1, 2, 3)
        assert t.quaternion_at((0, 0, 1)) == Quaternion(4, 5, 6, 7)

    def test_rejects_bad_channel_count(self):
        with pytest.raises(ShapeError):
            pack_channels(np.zeros((2, 2, 3)))

    @given(arrays(np.float64, (3, 4, 8),
                  elements=st.floats(-1e6, 1e6, allow_nan=False)))
    @settings(max_examples=50)
    def test_round_trip_bit_exact(self, x):
        back = unpack_channels(pack_channels(x))
        assert back.shape == x.shape
        assert np.array_equal(back, x)

    def test_plane_memory_layout_is_planar(self, rng):
        t = QTensor(np.ascontiguousarray(rng.standard_normal((4, 2, 3))))
        flat = t.planes.reshape(-1)
        assert np.array_equal(flat[:6], t.r.reshape(-1))
        assert np.array_equal(flat[6:12], t.i.reshape(-1))


class TestWindow:
    def test_unit_window_counts(self, rng):
        t = QTensor(rng.standard_normal((4, 4, 5)))
        wins = list(window(t, (1, 1)))
        assert len(wins) == 20

    def test_valid_mode_count(self, rng):
        t = QTensor(rng.standard_normal((4, 5, 5)))
        wins = list(window(t, (3, 3)))
        assert len(wins) == 9
        assert wins[0].shape == (3, 3)

    def test_strided_count(self, rng):
        t = QTensor(rng.standard_normal((4, 7, 7)))
        wins = list(window(t, (3, 3), stride=2))
        assert len(wins) == 9

    def test_scan_order_deterministic(self, rng):
        t = QTensor(rng.standard_normal((4, 3, 3)))
        a = [w.planes.copy() for w in window(t, (2, 2))]
        b = [w.planes.copy() for w in window(t, (2, 2))]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        # row-major: the second window shifts along the last windowed axis
        assert np.array_equal(a[1], t.planes[:, 0:2, 1:3])

    def test_oversized_window_raises(self, rng):
        t = QTensor(rng.standard_normal((4, 3, 3)))
        with pytest.raises(ShapeError):
            list(window(t, (4, 4)))

    def test_carries_trailing_axes(self, rng):
        t = QTensor(rng.standard_normal((4, 5, 5, 2)))
        wins = list(window(t, (2, 2)))
        assert wins[0].shape == (2, 2, 2)

    def test_pad_zero_border(self, rng):
        t = QTensor(rng.standard_normal((4, 2, 2)))
        p = pad(t, (1, 1))
        assert p.shape == (4, 4)
        assert not np.any(p.planes[:, 0, :])
        assert np.array_equal(p.planes[:, 1:3, 1:3], t.planes)


class TestQT1Format:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        t = QTensor(rng.standard_normal((4, 3, 5, 2)).astype(np.float32))
        path = tmp_path / "t.qt"
        save_qt(t, path)
        back = load_qt(path)
        assert back.shape == t.shape
        assert np.array_equal(back.planes, t.planes)
        save_qt(back, tmp_path / "t2.qt")
        assert (tmp_path / "t.qt").read_bytes() == \
            (tmp_path / "t2.qt").read_bytes()

    def test_header_layout(self, tmp_path):
        t = QTensor.zeros((2, 3), dtype=np.float32)
        path = tmp_path / "t.qt"
        save_qt(t, path)
        raw = path.read_bytes()
        assert raw[:4] == b"QT1\x00"
        assert raw[4] == 2
        assert int.from_bytes(raw[5:9], "little") == 2
        assert int.from_bytes(raw[9:13], "little") == 3
        assert len(raw) == 13 + 4 * 4 * 6

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.qt"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(CheckpointCorruptError):
            load_qt(path)

    def test_truncated_rejected(self, tmp_path, rng):
        t = QTensor(rng.standard_normal((4, 3, 3)).astype(np.float32))
        path = tmp_path / "t.qt"
        save_qt(t, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(CheckpointCorruptError):
            load_qt(path)


class TestTensorBasics:
    def test_component_views(self, rng):
        planes = rng.standard_normal((4, 2, 2))
        t = QTensor(planes)
        assert np.shares_memory(t.r, planes)
        assert np.array_equal(t.k, planes[3])

    def test_arithmetic(self, rng):
        a = QTensor(rng.standard_normal((4, 3)))
        b = QTensor(rng.standard_normal((4, 3)))
        assert np.allclose((a + b).planes, a.planes + b.planes)
        assert np.allclose((a - b).planes, a.planes - b.planes)
        assert np.allclose((2.0 * a).planes, 2.0 * a.planes)

    def test_invariant_plane_counts(self, rng):
        t = QTensor(rng.standard_normal((4, 2, 5)))
        assert t.size == 10
        assert all(t.planes[c].size == t.size for c in range(4))

    def test_getitem_views(self, rng):
        t = QTensor(rng.standard_normal((4, 4, 4)))
        sub = t[1:3, 2:4]
        assert sub.shape == (2, 2)
        assert np.shares_memory(sub.planes, t.planes)
