import threading

import numpy as np
import pytest

from dragvid.encoding import (
    DragEncoding,
    EncodingCache,
    MalformedEncodingError,
    decode_drag,
    encode_drag,
    encode_drag_set,
)
from dragvid.types import Drag, DragSet, Resolution

from conftest import random_drag


def static_drag(point, n):
    return Drag(origin=point, trajectory=tuple([point] * n))


class TestEncodeDrag:
    def test_origin_cell_zero_case(self):
        # u = (0, 0) at s=8, H=W=256 marks cell (0, 0) with value (0, 0).
        enc = encode_drag(static_drag((0, 0), 3), 8, Resolution(256, 256))
        assert enc.shape == (3, 8, 8, 6)
        assert enc[0, 0, 0, 0] == 0.0 and enc[0, 0, 0, 1] == 0.0
        rest = enc[:, :, :, :].copy()
        rest[:, 0, 0, :] = -1.0
        assert (rest == -1.0).all()

    def test_fractional_cell_value(self):
        # floor(8*100/256) = 3 rem 0.125; floor(8*37/256) = 1 rem 0.15625.
        enc = encode_drag(static_drag((100, 37), 2), 8, Resolution(256, 256))
        cell = enc[0, 3, 1]
        assert cell[0] == pytest.approx(0.125, abs=1e-7)
        assert cell[1] == pytest.approx(0.15625, abs=1e-7)
        marked = np.argwhere(enc[0, :, :, 0] >= 0)
        assert marked.tolist() == [[3, 1]]

    def test_static_drag_groups_identical(self):
        enc = encode_drag(static_drag((17, 42), 5), 16, Resolution(64, 64))
        for n in range(5):
            np.testing.assert_array_equal(enc[n, :, :, 0:2], enc[n, :, :, 2:4])
            np.testing.assert_array_equal(enc[n, :, :, 2:4], enc[n, :, :, 4:6])

    def test_marked_cell_count_per_group(self):
        rng = np.random.default_rng(0)
        res = Resolution(64, 64)
        for _ in range(20):
            drag = random_drag(rng, res, 6)
            enc = encode_drag(drag, 8, res)
            for n in range(6):
                for group in (0, 2, 4):
                    assert (enc[n, :, :, group] >= 0).sum() == 1

    def test_translation_by_full_cell_shifts_index_only(self):
        res = Resolution(64, 64)
        s = 8
        cell_px = res.height // s  # 8 px per cell
        drag = static_drag((10, 18), 2)
        shifted = static_drag((10 + cell_px, 18), 2)
        a = encode_drag(drag, s, res)
        b = encode_drag(shifted, s, res)
        ca = np.argwhere(a[0, :, :, 0] >= 0)[0]
        cb = np.argwhere(b[0, :, :, 0] >= 0)[0]
        assert cb[0] == ca[0] + 1 and cb[1] == ca[1]
        assert a[0, ca[0], ca[1], 0] == b[0, cb[0], cb[1], 0]
        assert a[0, ca[0], ca[1], 1] == b[0, cb[0], cb[1], 1]


class TestEncodeDragSet:
    def test_empty_set_is_all_negative_one(self):
        enc = encode_drag_set(DragSet.of([]), 8, Resolution(64, 64), frame_count=4)
        assert isinstance(enc, DragEncoding)
        assert enc.tensor.shape == (4, 8, 8, 30)
        assert (enc.tensor == -1.0).all()

    def test_full_capacity_fills_every_slot(self):
        rng = np.random.default_rng(1)
        res = Resolution(64, 64)
        drags = [random_drag(rng, res, 4) for _ in range(5)]
        enc = encode_drag_set(DragSet.of(drags), 8, res, frame_count=4).tensor
        for k in range(5):
            block = enc[..., 6 * k : 6 * (k + 1)]
            assert (block >= 0).any(), f"slot {k} left empty"

    def test_permuting_drags_permutes_blocks(self):
        rng = np.random.default_rng(2)
        res = Resolution(64, 64)
        d0, d1 = random_drag(rng, res, 4), random_drag(rng, res, 4)
        a = encode_drag_set(DragSet.of([d0, d1]), 8, res, 4).tensor
        b = encode_drag_set(DragSet.of([d1, d0]), 8, res, 4).tensor
        np.testing.assert_array_equal(a[..., 0:6], b[..., 6:12])
        np.testing.assert_array_equal(a[..., 6:12], b[..., 0:6])
        np.testing.assert_array_equal(a[..., 12:], b[..., 12:])


class TestDecodeDrag:
    @pytest.mark.parametrize("side", [64, 256])
    @pytest.mark.parametrize("s", [8, 16, 32, 64])
    def test_roundtrip_random_drags(self, side, s):
        rng = np.random.default_rng(side * 1000 + s)
        res = Resolution(side, side)
        for _ in range(50):
            drag = random_drag(rng, res, 6)
            assert decode_drag(encode_drag(drag, s, res), res) == drag

    def test_all_negative_slice_is_malformed(self):
        enc = np.full((2, 8, 8, 6), -1.0, dtype=np.float32)
        with pytest.raises(MalformedEncodingError):
            decode_drag(enc, Resolution(64, 64))

    def test_two_marks_in_one_group_is_malformed(self):
        res = Resolution(64, 64)
        enc = encode_drag(static_drag((5, 5), 2), 8, res)
        enc[0, 7, 7, 0] = 0.25
        enc[0, 7, 7, 1] = 0.25
        with pytest.raises(MalformedEncodingError):
            decode_drag(enc, res)

    def test_wrong_shape_is_malformed(self):
        with pytest.raises(MalformedEncodingError):
            decode_drag(np.zeros((2, 8, 8, 4), dtype=np.float32), Resolution(64, 64))


class TestEncodingCache:
    def test_hit_returns_same_object(self):
        cache = EncodingCache()
        rng = np.random.default_rng(3)
        res = Resolution(64, 64)
        ds = DragSet.of([random_drag(rng, res, 4)])
        first = cache.get(ds, 8, res, 4)
        second = cache.get(ds, 8, res, 4)
        assert first is second

    def test_distinct_keys_for_distinct_inputs(self):
        rng = np.random.default_rng(4)
        res = Resolution(64, 64)
        ds = DragSet.of([random_drag(rng, res, 4)])
        assert EncodingCache.key(ds, 8, res, 4) != EncodingCache.key(ds, 16, res, 4)
        assert EncodingCache.key(ds, 8, res, 4) != EncodingCache.key(
            ds, 8, Resolution(128, 128), 4
        )

    def test_eviction_respects_capacity(self):
        cache = EncodingCache(capacity=2)
        rng = np.random.default_rng(5)
        res = Resolution(64, 64)
        for _ in range(5):
            cache.get(DragSet.of([random_drag(rng, res, 4)]), 8, res, 4)
        assert len(cache._entries) == 2

    def test_concurrent_access(self):
        cache = EncodingCache()
        res = Resolution(64, 64)
        rng = np.random.default_rng(6)
        sets = [DragSet.of([random_drag(rng, res, 4)]) for _ in range(8)]
        errors = []

        def worker():
            try:
                for ds in sets:
                    enc = cache.get(ds, 16, res, 4)
                    assert enc.tensor.shape == (4, 16, 16, 30)
            except Exception as exc:  # noqa: BLE001
                errors.append(exc)

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
