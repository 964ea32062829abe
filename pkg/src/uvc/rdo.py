"""Lagrangian mode decision and partition search.

Costs are kept as exact integers. Rates are in 1/32768-bit units priced
against a frozen copy of the context states taken at the start of the CTU,
and the comparison key is ``D * 2**31 + round(lambda * 2**16) * R``. Because
the key is linear in (D, R), the cost of a tree is the sum of its parts and
recomputing it from the coded syntax gives the same number exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from uvc.bitstream import COST0, COST1, COST_ONE_BIT, Contexts, RateCounter, ue_length
from uvc.partition import (
    ALL_SPLITS,
    DEFAULT_MAX_DEPTH,
    DEFAULT_MIN_SIZE,
    BlockRect,
    PartitionNode,
    SplitMode,
    reachable_rects,
    split,
    split_candidates,
    write_split,
)
from uvc.prediction import IntraMode, SearchTables, interpolate, intra_predict_batch, pad_edge
from uvc.transform import dequantize, forward_transform, inverse_transform, qp_offsets, quantize, residual_rate

LAMBDA_K_INTER = 0.57
LAMBDA_K_INTRA = 0.68
LAMBDA_BITS = 16
DIST_SHIFT = 31
CHROMA_QP_OFFSET = 1
DEFAULT_SEARCH_RANGE = 8
SUBSTITUTE = 128


def lambda_from_qp(qp: int, intra: bool) -> float:
    k = LAMBDA_K_INTRA if intra else LAMBDA_K_INTER
    return k * 2.0 ** ((qp - 12) / 3.0)


def lambda_fixed(lam: float) -> int:
    return int(round(lam * (1 << LAMBDA_BITS)))


def chroma_qp(qp: int) -> int:
    return min(qp + CHROMA_QP_OFFSET, 51)


@dataclass(frozen=True)
class RdCost:
    """Distortion (SSE), rate (1/32768 bits) and the multiplier they were weighed with."""

    distortion: int
    rate: int
    lam: float

    @property
    def bits(self) -> float:
        return self.rate / COST_ONE_BIT

    def total(self) -> float:
        return self.distortion + self.lam * self.bits

    @property
    def key(self) -> int:
        return (self.distortion << DIST_SHIFT) + lambda_fixed(self.lam) * self.rate


@dataclass
class RefPicture:
    """A decoded picture as a motion reference: sample planes plus its 4x4 motion field."""

    poc: int
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    motion: np.ndarray | None = None  # (H/4, W/4, 2) half-pel vectors, zero where intra
    _padded: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=np.int64)
        self.v = np.asarray(self.v, dtype=np.int64)
        if self.motion is None:
            h, w = self.y.shape
            self.motion = np.zeros((h // 4, w // 4, 2), dtype=np.int64)

    def padded(self, comp: int, pad: int) -> np.ndarray:
        key = (comp, pad)
        if key not in self._padded:
            self._padded[key] = pad_edge((self.y, self.u, self.v)[comp], pad)
        return self._padded[key]


@dataclass
class LeafCoding:
    """Everything coded for one leaf; chroma fields are filled after the luma search."""

    intra: bool
    mode: int = 0
    ref_idx: int = 0
    mv: tuple = (0, 0)
    mvd: tuple = (0, 0)
    levels: np.ndarray | None = None
    levels_u: np.ndarray | None = None
    levels_v: np.ndarray | None = None
    distortion: int = 0
    rate: int = 0


@dataclass
class ModeDecision:
    tree: PartitionNode
    cost: RdCost


def region_lines(recon: np.ndarray, region: BlockRect):
    """Row above and column left of ``region`` (128 where outside the picture)."""
    if region.y > 0:
        top = np.asarray(recon[region.y - 1, region.x:region.x + region.w], dtype=np.int64)
    else:
        top = np.full(region.w, SUBSTITUTE, dtype=np.int64)
    if region.x > 0:
        left = np.asarray(recon[region.y:region.y + region.h, region.x - 1], dtype=np.int64)
    else:
        left = np.full(region.h, SUBSTITUTE, dtype=np.int64)
    return top, left


def gather_blocks(plane: np.ndarray, xs, ys, w: int, h: int) -> np.ndarray:
    rows = np.asarray(ys)[:, None, None] + np.arange(h)[None, :, None]
    cols = np.asarray(xs)[:, None, None] + np.arange(w)[None, None, :]
    return np.asarray(plane, dtype=np.int64)[rows, cols]


def predict_blocks(comp: int, xs, ys, w: int, h: int, intra, modes, ref_idx, mvs,
                   lines, region: BlockRect, refs, search_range: int) -> np.ndarray:
    """Prediction for n same-sized blocks of one component (chroma in chroma coordinates).

    ``lines`` are the region's (top, left) neighbour lines and ``region`` is
    expressed in the same component's coordinates.
    """
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    intra = np.asarray(intra, dtype=bool)
    modes = np.asarray(modes, dtype=np.int64)
    ref_idx = np.asarray(ref_idx, dtype=np.int64)
    mvs = np.asarray(mvs, dtype=np.int64).reshape(-1, 2)
    n = len(xs)
    out = np.zeros((n, h, w), dtype=np.int64)
    top_line, left_line = lines
    for m in IntraMode:
        sel = intra & (modes == m)
        if not sel.any():
            continue
        top = top_line[(xs[sel] - region.x)[:, None] + np.arange(w)]
        left = left_line[(ys[sel] - region.y)[:, None] + np.arange(h)]
        out[sel] = intra_predict_batch(m, left, top, w, h)
    unit = 2 if comp == 0 else 4
    pad = search_range + 2 if comp == 0 else search_range // 2 + 2
    for r, ref in enumerate(refs):
        sel = ~intra & (ref_idx == r)
        if not sel.any():
            continue
        padded = ref.padded(comp, pad)
        out[sel] = interpolate(padded, pad, xs[sel], ys[sel], w, h, mvs[sel, 0], mvs[sel, 1], unit)
    return out


def reconstruct_blocks(pred: np.ndarray, levels: np.ndarray, qp: int) -> np.ndarray:
    h, w = pred.shape[-2:]
    res = inverse_transform(dequantize(levels, qp, qp_offsets(h, w)))
    return np.clip(pred + res, 0, 255)


def code_blocks(orig: np.ndarray, pred: np.ndarray, qp: int, intra, ctx, chroma: bool):
    """Transform, quantize and reconstruct a batch; returns (levels, recon, sse, residual rate)."""
    n, h, w = orig.shape
    intra = np.asarray(intra, dtype=bool).reshape(-1, 1, 1)
    coeffs = forward_transform(orig - pred)
    levels = quantize(coeffs, qp, intra, qp_offsets(h, w))
    recon = reconstruct_blocks(pred, levels, qp)
    d = orig - recon
    dist = (d * d).reshape(n, -1).sum(axis=1)
    rate = residual_rate(levels, ctx, chroma)
    return levels, recon, dist, rate


def zero_residual_rate(ctx, chroma: bool) -> int:
    """Cost of a block sent with its coded-block flag cleared."""
    return int(COST0[ctx[Contexts.CBF_CHROMA if chroma else Contexts.CBF_LUMA]])


def select_residual(orig: np.ndarray, pred: np.ndarray, qp: int, intra, ctx, chroma: bool, lam_fix: int):
    """Quantized levels or an all-zero residual per block, whichever costs less; returns (levels, dist, rate)."""
    levels, _, dist, rate = code_blocks(orig, pred, qp, intra, ctx, chroma)
    d0 = ((orig - pred) ** 2).reshape(len(orig), -1).sum(axis=1)
    r0 = zero_residual_rate(ctx, chroma)
    drop = (d0 << DIST_SHIFT) + lam_fix * r0 < (dist << DIST_SHIFT) + lam_fix * rate
    levels = np.where(drop[:, None, None], 0, levels)
    return levels, np.where(drop, d0, dist), np.where(drop, r0, rate)


def se_length(v):
    v = np.asarray(v, dtype=np.int64)
    return ue_length(np.where(v > 0, 2 * v - 1, -2 * v))


def intra_syntax_rate(ctx, slice_intra: bool) -> int:
    rate = 2 * COST_ONE_BIT
    if not slice_intra:
        rate += int(COST0[ctx[Contexts.PRED_MODE]])
    return rate


def inter_syntax_rate(ctx, nrefs: int, ref_idx: int, mvd) -> np.ndarray:
    mvd = np.asarray(mvd, dtype=np.int64).reshape(-1, 2)
    rate = int(COST1[ctx[Contexts.PRED_MODE]])
    if nrefs == 2:
        rate += int(COST1[ctx[Contexts.REF_IDX]] if ref_idx else COST0[ctx[Contexts.REF_IDX]])
    return rate + (se_length(mvd[:, 0]) + se_length(mvd[:, 1])) * COST_ONE_BIT


def mv_predictor(ref: RefPicture, xs, ys) -> np.ndarray:
    return ref.motion[np.asarray(ys) // 4, np.asarray(xs) // 4]


class CtuSearch:
    """Exhaustive RD search inside one coding region (normally a CTU).

    Intra blocks predict only from samples outside the region, so a leaf's
    cost depends on nothing but its own rectangle and every distinct
    rectangle is evaluated once, batched by size.
    """

    def __init__(self, cur, recon, region: BlockRect, refs, qp: int, lam: float, ctx,
                 slice_intra: bool | None = None, search_range: int = DEFAULT_SEARCH_RANGE,
                 min_size: int = DEFAULT_MIN_SIZE, max_depth: int = DEFAULT_MAX_DEPTH):
        self.cur = np.asarray(cur, dtype=np.int64)
        self.region = region
        self.refs = list(refs)
        self.slice_intra = (not self.refs) if slice_intra is None else slice_intra
        if self.slice_intra:
            self.refs = []
        self.qp = qp
        self.lam = lam
        self.lam_fix = lambda_fixed(lam)
        self.ctx = np.asarray(ctx, dtype=np.int32).copy()
        self.search_range = search_range
        self.min_size = min_size
        self.max_depth = max_depth
        self.lines = region_lines(recon, region)
        self._tables = [None] * len(self.refs)
        self.leaves: dict[BlockRect, LeafCoding] = {}
        self._split_rates: dict = {}

    def _search_tables(self, r: int) -> SearchTables:
        if self._tables[r] is None:
            self._tables[r] = SearchTables(self.cur, self.refs[r].y, self.region, self.search_range)
        return self._tables[r]

    def evaluate(self, rects) -> None:
        """Decide the best non-split coding for every rect not yet evaluated."""
        groups: dict = {}
        for r in rects:
            if r not in self.leaves:
                groups.setdefault((r.w, r.h), []).append(r)
        for (w, h), group in sorted(groups.items()):
            self._evaluate_group(group, w, h)

    def _evaluate_group(self, group, w: int, h: int) -> None:
        n = len(group)
        xs = np.array([r.x for r in group], dtype=np.int64)
        ys = np.array([r.y for r in group], dtype=np.int64)
        orig = gather_blocks(self.cur, xs, ys, w, h)
        preds, intra_flags, syn_rates, infos = [], [], [], []
        zeros = np.zeros(n, dtype=np.int64)
        for m in IntraMode:
            preds.append(predict_blocks(0, xs, ys, w, h, np.ones(n, bool), zeros + m, zeros, np.zeros((n, 2)),
                                        self.lines, self.region, [], self.search_range))
            intra_flags.append(True)
            syn_rates.append(np.full(n, intra_syntax_rate(self.ctx, self.slice_intra), dtype=np.int64))
            infos.append((True, int(m), 0, None, None))
        local = np.stack([xs - self.region.x, ys - self.region.y, zeros + w, zeros + h], axis=1)
        for ri, ref in enumerate(self.refs):
            mvs, _ = self._search_tables(ri).search(local)
            preds.append(predict_blocks(0, xs, ys, w, h, np.zeros(n, bool), zeros, zeros + ri, mvs,
                                        self.lines, self.region, self.refs, self.search_range))
            mvd = mvs - mv_predictor(ref, xs, ys)
            intra_flags.append(False)
            syn_rates.append(inter_syntax_rate(self.ctx, len(self.refs), ri, mvd))
            infos.append((False, 0, ri, mvs, mvd))
        c = len(preds)
        pred_all = np.concatenate(preds)
        orig_all = np.broadcast_to(orig[None], (c, n, h, w)).reshape(c * n, h, w)
        intra_all = np.repeat(np.array(intra_flags), n)
        levels, _, dist, res_rate = code_blocks(orig_all, pred_all, self.qp, intra_all, self.ctx, False)
        # every prediction is also priced with its residual dropped (coded-block flag 0)
        d0 = (orig_all - pred_all) ** 2
        dist = np.concatenate([dist.reshape(c, n), d0.reshape(c, n, -1).sum(axis=2)])
        syn = np.stack(syn_rates)
        rate = np.concatenate([res_rate.reshape(c, n) + syn, zero_residual_rate(self.ctx, False) + syn])
        keys = (dist << DIST_SHIFT) + self.lam_fix * rate
        best = np.argmin(keys, axis=0)  # first minimum follows the candidate order
        levels = levels.reshape(c, n, h, w)
        for i, rect in enumerate(group):
            k = int(best[i])
            is_intra, mode, ri, mvs, mvd = infos[k % c]
            lv = levels[k, i] if k < c else np.zeros((h, w))
            leaf = LeafCoding(intra=is_intra, mode=mode, ref_idx=ri, levels=lv.astype(np.int32),
                              distortion=int(dist[k, i]), rate=int(rate[k, i]))
            if not is_intra:
                leaf.mv = (int(mvs[i, 0]), int(mvs[i, 1]))
                leaf.mvd = (int(mvd[i, 0]), int(mvd[i, 1]))
            self.leaves[rect] = leaf

    def split_rate(self, rect: BlockRect, mode: SplitMode, cands) -> int:
        key = (rect.w, rect.h, int(mode), tuple(cands))
        if key not in self._split_rates:
            rc = RateCounter()
            write_split(rc, self.ctx, rect, mode, list(cands))
            self._split_rates[key] = rc.bits
        return self._split_rates[key]

    def leaf_key(self, rect: BlockRect) -> int:
        leaf = self.leaves[rect]
        return (leaf.distortion << DIST_SHIFT) + self.lam_fix * leaf.rate

    def choose_partition(self, rect: BlockRect | None = None, mode_set=ALL_SPLITS,
                         max_depth: int | None = None) -> ModeDecision:
        rect = self.region if rect is None else rect
        depth = self.max_depth if max_depth is None else max_depth
        self.evaluate(reachable_rects(rect, mode_set, self.min_size, depth))
        memo: dict = {}

        def best(r: BlockRect, depth_left: int):
            key = (r, depth_left)
            if key in memo:
                return memo[key]
            cands = split_candidates(r, self.min_size, depth_left)
            leaf = self.leaves[r]
            d = leaf.distortion
            rt = leaf.rate + self.split_rate(r, SplitMode.NONE, cands)
            choice = ((d << DIST_SHIFT) + self.lam_fix * rt, d, rt, SplitMode.NONE)
            for m in cands:
                if m not in mode_set:
                    continue
                d = 0
                rt = self.split_rate(r, m, cands)
                for child in split(r, m):
                    _, cd, cr, _ = best(child, depth_left - 1)
                    d += cd
                    rt += cr
                k = (d << DIST_SHIFT) + self.lam_fix * rt
                if k < choice[0]:
                    choice = (k, d, rt, m)
            memo[key] = choice
            return choice

        def build(r: BlockRect, depth_left: int) -> PartitionNode:
            mode = memo[(r, depth_left)][3]
            node = PartitionNode(r, mode)
            if mode == SplitMode.NONE:
                node.leaf = self.leaves[r]
            else:
                node.children = [build(c, depth_left - 1) for c in split(r, mode)]
            return node

        _, d, rt, _ = best(rect, depth)
        return ModeDecision(build(rect, depth), RdCost(d, rt, self.lam))

    def choose_leaf_mode(self, rect: BlockRect) -> ModeDecision:
        self.evaluate([rect])
        leaf = self.leaves[rect]
        return ModeDecision(PartitionNode(rect, SplitMode.NONE, leaf=leaf),
                            RdCost(leaf.distortion, leaf.rate, self.lam))


def _as_refs(refs) -> list[RefPicture]:
    out = []
    for i, r in enumerate(refs or []):
        if isinstance(r, RefPicture):
            out.append(r)
        else:
            plane = r.data if hasattr(r, "width") else np.asarray(r)
            h, w = plane.shape
            out.append(RefPicture(i, plane, np.zeros((h // 2, w // 2)), np.zeros((h // 2, w // 2))))
    return out


def _plane(p) -> np.ndarray:
    return p.data if hasattr(p, "width") else np.asarray(p)


def choose_leaf_mode(rect: BlockRect, cur, refs, qp: int, lam: float, *, recon=None, ctx=None,
                     search_range: int = DEFAULT_SEARCH_RANGE) -> ModeDecision:
    """Best non-split coding of ``rect``; neighbours come from ``recon`` (default: ``cur``)."""
    cur = _plane(cur)
    search = CtuSearch(cur, cur if recon is None else _plane(recon), rect, _as_refs(refs), qp, lam,
                       Contexts.fresh() if ctx is None else ctx, search_range=search_range)
    return search.choose_leaf_mode(rect)


def choose_partition(rect: BlockRect, cur, refs, qp: int, lam: float, mode_set=ALL_SPLITS, *,
                     recon=None, ctx=None, search_range: int = DEFAULT_SEARCH_RANGE,
                     min_size: int = DEFAULT_MIN_SIZE, max_depth: int = DEFAULT_MAX_DEPTH) -> ModeDecision:
    """Exhaustive partition search of ``rect`` over ``mode_set``."""
    cur = _plane(cur)
    search = CtuSearch(cur, cur if recon is None else _plane(recon), rect, _as_refs(refs), qp, lam,
                       Contexts.fresh() if ctx is None else ctx, search_range=search_range,
                       min_size=min_size, max_depth=max_depth)
    return search.choose_partition(rect, mode_set)
