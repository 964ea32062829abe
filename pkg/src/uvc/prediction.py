"""Intra prediction, half-pel motion search/compensation and boundary strength."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from uvc import kernels
from uvc.core import PlaneBuffer
from uvc.partition import BlockRect

SUBSTITUTE = 128


class IntraMode(enum.IntEnum):
    DC = 0
    PLANAR = 1
    HOR = 2
    VER = 3


@dataclass(frozen=True)
class MotionVector:
    dx: int  # half-sample units
    dy: int
    ref_poc: int = 0


def _plane(p) -> np.ndarray:
    return p.data if isinstance(p, PlaneBuffer) else np.asarray(p)


def _log2(n: int) -> int:
    return n.bit_length() - 1


def intra_predict(mode: IntraMode, left, top, w: int, h: int) -> np.ndarray:
    """Predict a (h, w) block from ``left`` (h samples) and ``top`` (w samples)."""
    return intra_predict_batch(mode, np.asarray(left)[None], np.asarray(top)[None], w, h)[0]


def intra_predict_batch(mode: IntraMode, left: np.ndarray, top: np.ndarray, w: int, h: int) -> np.ndarray:
    """Vectorised :func:`intra_predict`: ``left`` is (n, h), ``top`` is (n, w)."""
    left = np.asarray(left, dtype=np.int64)
    top = np.asarray(top, dtype=np.int64)
    n = left.shape[0]
    if mode == IntraMode.DC:
        total = left.sum(axis=1) + top.sum(axis=1)
        dc = (total + (w + h) // 2) // (w + h)
        return np.broadcast_to(dc[:, None, None], (n, h, w)).astype(np.int64)
    if mode == IntraMode.HOR:
        return np.broadcast_to(left[:, :, None], (n, h, w)).astype(np.int64)
    if mode == IntraMode.VER:
        return np.broadcast_to(top[:, None, :], (n, h, w)).astype(np.int64)
    # planar: bilinear blend towards the top-right and bottom-left corner samples
    xs = np.arange(w)[None, None, :]
    ys = np.arange(h)[None, :, None]
    tr = top[:, -1][:, None, None]
    bl = left[:, -1][:, None, None]
    horiz = ((w - 1 - xs) * left[:, :, None] + (xs + 1) * tr) * h
    vert = ((h - 1 - ys) * top[:, None, :] + (ys + 1) * bl) * w
    shift = _log2(w) + _log2(h) + 1
    return (horiz + vert + w * h) >> shift


def neighbor_lines(plane: np.ndarray, rect: BlockRect, region: BlockRect):
    """Reference samples for ``rect``: the row above and the column left of ``region``.

    Only samples outside the enclosing coding region are used, so every block
    inside it is predicted from already final samples. Missing samples
    (outside the picture) are replaced by 128.
    """
    if region.y > 0:
        top = plane[region.y - 1, rect.x:rect.x + rect.w].astype(np.int64)
    else:
        top = np.full(rect.w, SUBSTITUTE, dtype=np.int64)
    if region.x > 0:
        left = plane[rect.y:rect.y + rect.h, region.x - 1].astype(np.int64)
    else:
        left = np.full(rect.h, SUBSTITUTE, dtype=np.int64)
    return left, top


def pad_edge(plane: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(np.asarray(plane, dtype=np.int64), pad, mode="edge")


def interpolate(padded: np.ndarray, pad: int, xs, ys, w: int, h: int, mvx, mvy, unit: int) -> np.ndarray:
    """Bilinear prediction of n (h, w) blocks at top-left (xs, ys).

    Vectors are in 1/``unit`` sample units (2 for luma half-pel, 4 for
    chroma quarter-pel). Weights are integers out of unit**2 with rounding
    half up, so unit 2 gives (a+b+1)>>1 and (a+b+c+d+2)>>2.
    """
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    mvx = np.asarray(mvx, dtype=np.int64)
    mvy = np.asarray(mvy, dtype=np.int64)
    sh = unit.bit_length() - 1
    fx = (mvx & (unit - 1))[:, None, None]
    fy = (mvy & (unit - 1))[:, None, None]
    rows = (pad + ys + (mvy >> sh))[:, None, None] + np.arange(h)[None, :, None]
    cols = (pad + xs + (mvx >> sh))[:, None, None] + np.arange(w)[None, None, :]
    if not fx.any() and not fy.any():
        return padded[rows, cols]
    a = padded[rows, cols]
    b = padded[rows, cols + 1]
    c = padded[rows + 1, cols]
    d = padded[rows + 1, cols + 1]
    gx, gy = unit - fx, unit - fy
    return (gx * gy * a + fx * gy * b + gx * fy * c + fx * fy * d + (1 << (2 * sh - 1))) >> (2 * sh)


def motion_compensate(ref, rect: BlockRect, mv: MotionVector) -> np.ndarray:
    """Half-pel bilinear motion compensation; reads outside the picture clamp to the edge."""
    plane = _plane(ref)
    pad = max(abs(mv.dx), abs(mv.dy)) // 2 + 2
    padded = pad_edge(plane, pad)
    return interpolate(padded, pad, [rect.x], [rect.y], rect.w, rect.h, [mv.dx], [mv.dy], 2)[0]


def chroma_compensate(ref_plane, x: int, y: int, w: int, h: int, dx: int, dy: int) -> np.ndarray:
    """Chroma block for a luma half-pel vector (quarter-pel in chroma samples)."""
    plane = _plane(ref_plane)
    pad = max(abs(dx), abs(dy)) // 4 + 2
    padded = pad_edge(plane, pad)
    return interpolate(padded, pad, [x], [y], w, h, [dx], [dy], 4)[0]


def _tiebreak_order(cands):
    """Sort key: smaller |dx|+|dy|, then smaller dy, then smaller dx."""
    return sorted(cands, key=lambda v: (abs(v[0]) + abs(v[1]), v[1], v[0]))


class SearchTables:
    """SAD summed-area tables for one coding region against one reference.

    Covers every integer offset in [-r, r]^2 and the three half-sample phases,
    so the SAD of any sub-block at any half-pel vector with |d| <= 2r is an
    O(1) lookup.
    """

    def __init__(self, cur: np.ndarray, ref: np.ndarray, region: BlockRect, search_range: int):
        r = search_range
        self.r = r
        self.region = region
        cur_blk = np.ascontiguousarray(cur[region.y:region.y + region.h, region.x:region.x + region.w], dtype=np.int32)
        padded = pad_edge(ref, r + 1)
        ox, oy = region.x, region.y
        win = padded[oy:oy + region.h + 2 * r + 2, ox:ox + region.w + 2 * r + 2]
        # phase planes: p00 integer, p10 horizontal half, p01 vertical half, p11 both
        p00 = win
        p10 = (win[:, :-1] + win[:, 1:] + 1) >> 1
        p01 = (win[:-1, :] + win[1:, :] + 1) >> 1
        p11 = (win[:-1, :-1] + win[:-1, 1:] + win[1:, :-1] + win[1:, 1:] + 2) >> 2
        tables = {}
        for key, plane in (((0, 0), p00), ((1, 0), p10), ((0, 1), p01), ((1, 1), p11)):
            # plane index (j, i) is sample (oy - r - 1 + j + fy/2, ox - r - 1 + i + fx/2)
            sub = np.ascontiguousarray(plane[1:1 + region.h + 2 * r, 1:1 + region.w + 2 * r], dtype=np.int32)
            tables[key] = kernels.error_integrals(cur_blk, sub, r, False)
        self.tables = tables
        self.side = 2 * r + 1
        int_cands = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
        self.int_order = _tiebreak_order(int_cands)
        self.int_index = np.array([(dy + r) * self.side + (dx + r) for dx, dy in self.int_order])
        self.int_table = np.ascontiguousarray(tables[(0, 0)][self.int_index])

    def sad(self, rects_local: np.ndarray, hx: int, hy: int) -> np.ndarray:
        """SAD of local rects (n, 4: x, y, w, h) at half-pel vector (hx, hy)."""
        fx, fy = hx & 1, hy & 1
        ix, iy = hx >> 1, hy >> 1
        k = (iy + self.r) * self.side + (ix + self.r)
        t = self.tables[(fx, fy)][k]
        x0, y0 = rects_local[:, 0], rects_local[:, 1]
        x1, y1 = x0 + rects_local[:, 2], y0 + rects_local[:, 3]
        return t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0]

    def search(self, rects_local: np.ndarray):
        """Full integer search then half-pel refinement for every rect.

        Returns (mvs (n, 2) in half-pel units, sads (n,)).
        """
        rects_local = np.asarray(rects_local, dtype=np.int64)
        n = len(rects_local)
        x0, y0 = rects_local[:, 0], rects_local[:, 1]
        x1, y1 = x0 + rects_local[:, 2], y0 + rects_local[:, 3]
        t = self.int_table  # candidates already in tie-break order
        sads = t[:, y1, x1] - t[:, y0, x1] - t[:, y1, x0] + t[:, y0, x0]
        ibest = np.array(self.int_order, dtype=np.int64)[np.argmin(sads, axis=0)]
        lim = 2 * self.r
        big = 4 * lim + 8
        cand_mv, cand_key = [], []
        for ay in (-1, 0, 1):
            for ax in (-1, 0, 1):
                hx = 2 * ibest[:, 0] + ax
                hy = 2 * ibest[:, 1] + ay
                ok = (np.abs(hx) <= lim) & (np.abs(hy) <= lim)
                k = ((hy >> 1) + self.r) * self.side + ((hx >> 1) + self.r)
                k = np.where(ok, k, 0)
                tab = self.tables[(ax & 1, ay & 1)]
                s = tab[k, y1, x1] - tab[k, y0, x1] - tab[k, y1, x0] + tab[k, y0, x0]
                tie = ((np.abs(hx) + np.abs(hy)) * big + (hy + lim)) * big + (hx + lim)
                key = np.where(ok, s * big ** 3 + tie, np.iinfo(np.int64).max)
                cand_mv.append(np.stack([hx, hy], axis=1))
                cand_key.append(key)
        keys = np.stack(cand_key)
        j = np.argmin(keys, axis=0)
        mvs = np.stack(cand_mv)[j, np.arange(n)]
        return mvs, keys[j, np.arange(n)] // big ** 3


def motion_search(block: BlockRect, cur, ref, search_range: int):
    """Best half-pel vector for ``block`` by SAD; returns (MotionVector, SAD)."""
    tables = SearchTables(_plane(cur), _plane(ref), block, search_range)
    mv, sad = tables.search(np.array([[0, 0, block.w, block.h]]))
    return MotionVector(int(mv[0, 0]), int(mv[0, 1])), int(sad[0])


@dataclass(frozen=True)
class BlockInfo:
    """What boundary-strength derivation needs to know about one side of an edge."""

    intra: bool
    coded: bool  # nonzero luma coefficients
    mv: tuple[int, int] = (0, 0)
    ref_poc: int = -1


def derive_bs(p: BlockInfo, q: BlockInfo) -> int:
    if p.intra or q.intra:
        return 2
    if p.coded or q.coded:
        return 1
    if abs(p.mv[0] - q.mv[0]) >= 2 or abs(p.mv[1] - q.mv[1]) >= 2 or p.ref_poc != q.ref_poc:
        return 1
    return 0


@dataclass
class BsMap:
    """Boundary strengths on the 4x4 grid.

    ``vertical[j, i]`` is the edge on the left of grid cell (j, i);
    ``horizontal[j, i]`` the edge above it. Non-edges hold 0.
    """

    vertical: np.ndarray
    horizontal: np.ndarray

    def plane(self, height: int, width: int) -> np.ndarray:
        """Per-sample strength: max over the edges touching each sample."""
        out = np.zeros((height, width), dtype=np.int64)
        v = np.repeat(self.vertical, 4, axis=0)  # (H, W/4)
        cols = np.arange(v.shape[1]) * 4
        for c in range(v.shape[1]):
            x = cols[c]
            if x == 0:
                continue
            out[:, x] = np.maximum(out[:, x], v[:, c])
            out[:, x - 1] = np.maximum(out[:, x - 1], v[:, c])
        hz = np.repeat(self.horizontal, 4, axis=1)  # (H/4, W)
        for r in range(hz.shape[0]):
            y = r * 4
            if y == 0:
                continue
            out[y] = np.maximum(out[y], hz[r])
            out[y - 1] = np.maximum(out[y - 1], hz[r])
        return out


def compute_bs_map(leaf_id: np.ndarray, intra: np.ndarray, coded: np.ndarray,
                   mvs: np.ndarray, ref_poc: np.ndarray) -> BsMap:
    """Vectorised BS over 4x4-grid maps (all shaped (H/4, W/4); ``mvs`` has a trailing 2)."""
    gh, gw = leaf_id.shape
    vert = np.zeros((gh, gw), dtype=np.int64)
    horz = np.zeros((gh, gw), dtype=np.int64)

    def strength(pi, qi, pc, qc, pm, qm, pr, qr):
        s = np.where((np.abs(pm - qm) >= 2).any(axis=-1) | (pr != qr), 1, 0)
        s = np.where(pc | qc, 1, s)
        return np.where(pi | qi, 2, s)

    edge = leaf_id[:, 1:] != leaf_id[:, :-1]
    s = strength(intra[:, :-1], intra[:, 1:], coded[:, :-1], coded[:, 1:],
                 mvs[:, :-1], mvs[:, 1:], ref_poc[:, :-1], ref_poc[:, 1:])
    vert[:, 1:] = np.where(edge, s, 0)
    edge = leaf_id[1:, :] != leaf_id[:-1, :]
    s = strength(intra[:-1], intra[1:], coded[:-1], coded[1:],
                 mvs[:-1], mvs[1:], ref_poc[:-1], ref_poc[1:])
    horz[1:, :] = np.where(edge, s, 0)
    return BsMap(vert, horz)


def boundary_mask(leaf_id: np.ndarray, height: int, width: int) -> np.ndarray:
    """1 on samples adjacent to a leaf boundary, 0 elsewhere."""
    zero = np.zeros((leaf_id.shape[0], leaf_id.shape[1]), dtype=np.int64)
    ones = np.ones_like(zero)
    edge_v = np.zeros_like(zero)
    edge_v[:, 1:] = leaf_id[:, 1:] != leaf_id[:, :-1]
    edge_h = np.zeros_like(zero)
    edge_h[1:, :] = leaf_id[1:, :] != leaf_id[:-1, :]
    return BsMap(edge_v * ones, edge_h * ones).plane(height, width)
