import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvc.core import (
    PSNR_SENTINEL,
    FrameBuffer,
    PlaneBuffer,
    frames_from_bytes,
    load_yuv420,
    psnr,
    save_yuv420,
)
from uvc.errors import InvalidArgumentError, MalformedInputError


def _random_frame(rng, w=16, h=16, poc=0):
    return FrameBuffer.from_arrays(rng.integers(0, 256, (h, w)), rng.integers(0, 256, (h // 2, w // 2)),
                                   rng.integers(0, 256, (h // 2, w // 2)), poc=poc)


@pytest.mark.parametrize("size,count", [(6, 1), (12, 2)])
def test_load_counts_frames(tmp_path, size, count):
    path = tmp_path / "clip.yuv"
    path.write_bytes(bytes(range(size)))
    frames = load_yuv420(path, 2, 2)
    assert len(frames) == count
    assert [f.poc for f in frames] == list(range(count))
    assert frames[0].y.data.tolist() == [[0, 1], [2, 3]]
    assert frames[0].u.data.tolist() == [[4]] and frames[0].v.data.tolist() == [[5]]


def test_load_rejects_partial_frame(tmp_path):
    path = tmp_path / "clip.yuv"
    path.write_bytes(bytes(7))
    with pytest.raises(MalformedInputError):
        load_yuv420(path, 2, 2)


def test_load_rejects_odd_dimensions(tmp_path):
    path = tmp_path / "clip.yuv"
    path.write_bytes(bytes(6))
    with pytest.raises(InvalidArgumentError):
        load_yuv420(path, 3, 2)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    frame = _random_frame(rng)
    path = tmp_path / "a.yuv"
    save_yuv420([frame], path)
    raw = path.read_bytes()
    assert raw == frame.to_bytes()
    assert load_yuv420(path, 16, 16) == [frame]


def test_save_empty_list_gives_empty_file(tmp_path):
    path = tmp_path / "empty.yuv"
    save_yuv420([], path)
    assert path.read_bytes() == b""


def test_save_rejects_mixed_dimensions(tmp_path):
    rng = np.random.default_rng(1)
    with pytest.raises(InvalidArgumentError):
        save_yuv420([_random_frame(rng, 16, 16), _random_frame(rng, 32, 16)], tmp_path / "x.yuv")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_bytes_round_trip(hw, hh, n, seed):
    w, h = 2 * hw, 2 * hh
    raw = np.random.default_rng(seed).integers(0, 256, n * w * h * 3 // 2).astype(np.uint8).tobytes()
    frames = frames_from_bytes(raw, w, h)
    assert b"".join(f.to_bytes() for f in frames) == raw


def test_plane_rejects_out_of_range_samples():
    with pytest.raises(InvalidArgumentError):
        PlaneBuffer(np.array([[0, 256]]))


def test_frame_rejects_wrong_chroma_size():
    with pytest.raises(InvalidArgumentError):
        FrameBuffer.from_arrays(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((2, 2)))


def test_psnr_identical_is_sentinel():
    p = PlaneBuffer(np.full((8, 8), 77))
    assert psnr(p, p) == PSNR_SENTINEL == 100.0


def test_psnr_off_by_one():
    a = PlaneBuffer(np.full((8, 8), 10))
    b = PlaneBuffer(np.full((8, 8), 11))
    assert psnr(a, b) == pytest.approx(10 * math.log10(65025), abs=1e-12)
    assert round(psnr(a, b), 2) == 48.13


def test_psnr_matches_direct_summation():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.integers(0, 256, (16, 24))
        b = rng.integers(0, 256, (16, 24))
        total = 0
        for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
            total += (x - y) ** 2
        expected = 10 * math.log10(255 * 255 / (total / a.size))
        assert psnr(PlaneBuffer(a), PlaneBuffer(b)) == pytest.approx(expected, abs=1e-9)


def test_psnr_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        psnr(PlaneBuffer(np.zeros((4, 4))), PlaneBuffer(np.zeros((4, 6))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_psnr_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = PlaneBuffer(rng.integers(0, 256, (4, 4))), PlaneBuffer(rng.integers(0, 256, (4, 4)))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_strictly_decreasing_in_mse():
    ref = PlaneBuffer(np.full((4, 4), 100))
    values = [psnr(ref, PlaneBuffer(np.full((4, 4), 100 + d))) for d in range(1, 40)]
    assert all(x > y for x, y in zip(values, values[1:]))
