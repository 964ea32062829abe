import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvc.core import PlaneBuffer
from uvc.partition import BlockRect
from uvc.prediction import (
    BlockInfo,
    IntraMode,
    MotionVector,
    chroma_compensate,
    compute_bs_map,
    derive_bs,
    intra_predict,
    motion_compensate,
    motion_search,
)


def test_dc_of_flat_neighbours():
    assert (intra_predict(IntraMode.DC, [128] * 8, [128] * 8, 8, 8) == 128).all()


def test_dc_rounds_the_mean():
    # (4 * 1 + 4 * 2) / 8 = 1.5 rounds up
    assert (intra_predict(IntraMode.DC, [1] * 4, [2] * 4, 4, 4) == 2).all()


def test_hor_and_ver_replicate():
    hor = intra_predict(IntraMode.HOR, [10, 20, 30, 40], [0] * 4, 4, 4)
    assert hor.tolist() == [[v] * 4 for v in (10, 20, 30, 40)]
    ver = intra_predict(IntraMode.VER, [0] * 4, [1, 2, 3, 4], 4, 4)
    assert ver.tolist() == [[1, 2, 3, 4]] * 4


@pytest.mark.parametrize("w,h", [(4, 4), (8, 4), (16, 64), (2, 2)])
def test_planar_of_constant(w, h):
    assert (intra_predict(IntraMode.PLANAR, [100] * h, [100] * w, w, h) == 100).all()


def test_planar_stays_in_neighbour_range():
    rng = np.random.default_rng(0)
    for _ in range(200):
        w, h = (int(v) for v in 2 ** rng.integers(1, 7, 2))
        left, top = rng.integers(0, 256, h), rng.integers(0, 256, w)
        p = intra_predict(IntraMode.PLANAR, left, top, w, h)
        lo, hi = min(left.min(), top.min()), max(left.max(), top.max())
        assert p.shape == (h, w) and p.min() >= lo and p.max() <= hi


def _texture(seed, h=48, w=48):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (h, w))


def test_search_identity():
    cur = _texture(1)
    mv, sad = motion_search(BlockRect(16, 16, 16, 16), cur, cur, 4)
    assert (mv.dx, mv.dy, sad) == (0, 0, 0)


def test_search_integer_shift():
    cur = _texture(2)
    ref = np.roll(cur, 2, axis=1)  # ref is cur moved right by 2 samples
    mv, sad = motion_search(BlockRect(16, 16, 16, 16), PlaneBuffer(cur), PlaneBuffer(ref), 4)
    assert (mv.dx, mv.dy, sad) == (4, 0, 0)


def test_search_constant_tie_break():
    flat = np.full((32, 32), 90)
    mv, sad = motion_search(BlockRect(8, 8, 8, 8), flat, flat, 4)
    assert (mv.dx, mv.dy, sad) == (0, 0, 0)


def _key(mv):
    return abs(mv[0]) + abs(mv[1]), mv[1], mv[0]


def _brute_force(cur, ref, rect, r):
    """Exhaustive integer search then the 8 half-pel neighbours, via motion_compensate."""
    blk = cur[rect.y:rect.y + rect.h, rect.x:rect.x + rect.w]

    def sad(hx, hy):
        return int(np.abs(blk - motion_compensate(ref, rect, MotionVector(hx, hy))).sum())

    ints = [(2 * dx, 2 * dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    best = min(ints, key=lambda v: (sad(*v), _key(v)))
    cands = [(best[0] + ax, best[1] + ay) for ay in (-1, 0, 1) for ax in (-1, 0, 1)]
    cands = [c for c in cands if abs(c[0]) <= 2 * r and abs(c[1]) <= 2 * r]
    win = min(cands, key=lambda v: (sad(*v), _key(v)))
    return win, sad(*win), min(sad(*v) for v in ints)


def test_search_matches_brute_force():
    rng = np.random.default_rng(3)
    for i in range(40):
        base = rng.integers(0, 256, (40, 40))
        if i % 2:  # smooth content gives half-pel winners and ties
            base = (base + np.roll(base, 1, 0) + np.roll(base, 1, 1) + np.roll(base, 1, (0, 1))) // 4
        ref = np.roll(base, tuple(int(v) for v in rng.integers(-3, 4, 2)), axis=(0, 1))
        x, y = (int(v) for v in rng.integers(0, 33, 2))
        rect = BlockRect(x, y, 8, 8)
        mv, sad = motion_search(rect, base, ref, 4)
        want, want_sad, best_int = _brute_force(base, ref, rect, 4)
        assert (mv.dx, mv.dy) == want and sad == want_sad
        assert sad <= best_int  # no worse than the global integer minimum


def test_compensate_agrees_with_search_sad():
    rng = np.random.default_rng(4)
    cur = _texture(5, 64, 64)
    ref = (cur + np.roll(cur, 1, 1) + 1) // 2
    for _ in range(100):
        w, h = (int(v) for v in 2 ** rng.integers(2, 5, 2))
        x, y = int(rng.integers(0, 65 - w)), int(rng.integers(0, 65 - h))
        rect = BlockRect(x, y, w, h)
        mv, sad = motion_search(rect, cur, ref, 3)
        pred = motion_compensate(ref, rect, mv)
        assert int(np.abs(cur[y:y + h, x:x + w] - pred).sum()) == sad
        assert abs(mv.dx) <= 6 and abs(mv.dy) <= 6


def test_integer_compensation_is_a_copy():
    ref = _texture(6)
    for dx, dy in [(0, 0), (2, 0), (-4, 6), (8, -8)]:
        got = motion_compensate(ref, BlockRect(16, 16, 8, 8), MotionVector(dx, dy))
        assert np.array_equal(got, ref[16 + dy // 2:24 + dy // 2, 16 + dx // 2:24 + dx // 2])


def test_half_pel_midpoint():
    ref = np.array([[10, 20], [10, 20]])
    assert motion_compensate(ref, BlockRect(0, 0, 1, 1), MotionVector(1, 0))[0, 0] == 15
    ref = np.array([[10, 11], [10, 11]])
    assert motion_compensate(ref, BlockRect(0, 0, 1, 1), MotionVector(1, 0))[0, 0] == 11  # half up


def test_out_of_picture_reads_clamp():
    ref = np.arange(16).reshape(4, 4)
    got = motion_compensate(ref, BlockRect(0, 0, 2, 2), MotionVector(-8, -8))
    assert (got == ref[0, 0]).all()


def test_chroma_quarter_pel():
    ref = np.array([[0, 40], [0, 40]])
    # luma half-pel 1 is a quarter sample in chroma: (3*0 + 1*40 + 2) >> 2
    assert chroma_compensate(ref, 0, 0, 1, 1, 1, 0)[0, 0] == 10
    assert chroma_compensate(ref, 0, 0, 1, 1, 2, 0)[0, 0] == 20


def test_bs_examples():
    intra = BlockInfo(True, False)
    inter = BlockInfo(False, False, (0, 0), 0)
    assert derive_bs(intra, inter) == 2
    assert derive_bs(inter, BlockInfo(False, False, (0, 0), 0)) == 0
    assert derive_bs(inter, BlockInfo(False, False, (4, 0), 0)) == 1
    assert derive_bs(inter, BlockInfo(False, False, (1, 1), 0)) == 0
    assert derive_bs(inter, BlockInfo(False, True, (0, 0), 0)) == 1
    assert derive_bs(inter, BlockInfo(False, False, (0, 0), 3)) == 1


block_info = st.builds(BlockInfo, st.booleans(), st.booleans(),
                       st.tuples(st.integers(-8, 8), st.integers(-8, 8)), st.integers(-1, 4))


@settings(max_examples=300, deadline=None)
@given(block_info, block_info)
def test_bs_symmetric(p, q):
    assert derive_bs(p, q) == derive_bs(q, p) in (0, 1, 2)


def test_bs_map_matches_pairwise_rule():
    rng = np.random.default_rng(7)
    gh, gw = 6, 8
    leaf = rng.integers(0, 5, (gh, gw))
    intra = rng.random((gh, gw)) < 0.2
    coded = rng.random((gh, gw)) < 0.3
    mvs = rng.integers(-3, 4, (gh, gw, 2))
    poc = rng.integers(0, 2, (gh, gw))
    bs = compute_bs_map(leaf, intra, coded, mvs, poc)

    def info(j, i):
        return BlockInfo(bool(intra[j, i]), bool(coded[j, i]), tuple(mvs[j, i]), int(poc[j, i]))

    for j in range(gh):
        for i in range(gw):
            v = derive_bs(info(j, i - 1), info(j, i)) if i and leaf[j, i] != leaf[j, i - 1] else 0
            hz = derive_bs(info(j - 1, i), info(j, i)) if j and leaf[j, i] != leaf[j - 1, i] else 0
            assert bs.vertical[j, i] == v and bs.horizontal[j, i] == hz
    mirrored = compute_bs_map(leaf[:, ::-1], intra[:, ::-1], coded[:, ::-1], mvs[:, ::-1], poc[:, ::-1])
    assert np.array_equal(mirrored.vertical[:, 1:], bs.vertical[:, 1:][:, ::-1])
