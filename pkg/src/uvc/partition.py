"""Coding-tree geometry: QT, BT and the four asymmetric quaternary (UQT) splits.

UQT cuts a block into four parts along one direction with extents 1/2, 1/4,
1/8 and 1/8 of the parent. The H modes cut the height, the V modes the width.
H1/V1 put the half-size part first (top / left) and the two eighths last;
H2/V2 are the mirror images.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

from uvc.bitstream import Contexts, area_class
from uvc.errors import InvalidArgumentError, MalformedBitstreamError

CTU_SIZE = 64
DEFAULT_MIN_SIZE = 4
DEFAULT_MAX_DEPTH = 4


class SplitMode(enum.IntEnum):
    NONE = 0
    QT = 1
    BT_H = 2
    BT_V = 3
    UQT_H1 = 4
    UQT_H2 = 5
    UQT_V1 = 6
    UQT_V2 = 7


# fixed order of the mode index binarization
SPLIT_ORDER = (
    SplitMode.QT,
    SplitMode.BT_H,
    SplitMode.BT_V,
    SplitMode.UQT_H1,
    SplitMode.UQT_H2,
    SplitMode.UQT_V1,
    SplitMode.UQT_V2,
)
QT_BT = frozenset({SplitMode.QT, SplitMode.BT_H, SplitMode.BT_V})
UQT_MODES = frozenset({SplitMode.UQT_H1, SplitMode.UQT_H2, SplitMode.UQT_V1, SplitMode.UQT_V2})
ALL_SPLITS = QT_BT | UQT_MODES

# part extents in eighths of the split dimension
_UQT_FIRST = (4, 2, 1, 1)
_UQT_SECOND = (1, 1, 2, 4)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True, order=True)
class BlockRect:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def mirrored_v(self, frame_h: int) -> BlockRect:
        """Flip top/bottom inside a region of height ``frame_h`` starting at 0."""
        return BlockRect(self.x, frame_h - self.y - self.h, self.w, self.h)

    def mirrored_h(self, frame_w: int) -> BlockRect:
        return BlockRect(frame_w - self.x - self.w, self.y, self.w, self.h)


def _cuts(total: int, eighths) -> list[tuple[int, int]]:
    out, pos = [], 0
    for e in eighths:
        size = total * e // 8
        out.append((pos, size))
        pos += size
    return out


def _geometric(rect: BlockRect, mode: SplitMode) -> list[BlockRect]:
    return list(_geometric_cached(rect, SplitMode(mode)))


@lru_cache(maxsize=1 << 16)
def _geometric_cached(rect: BlockRect, mode: SplitMode) -> tuple:
    return tuple(_geometric_uncached(rect, mode))


def _geometric_uncached(rect: BlockRect, mode: SplitMode) -> list[BlockRect]:
    x, y, w, h = rect.x, rect.y, rect.w, rect.h
    if mode == SplitMode.NONE:
        return [rect]
    if mode == SplitMode.QT:
        hw, hh = w // 2, h // 2
        return [BlockRect(x, y, hw, hh), BlockRect(x + hw, y, hw, hh),
                BlockRect(x, y + hh, hw, hh), BlockRect(x + hw, y + hh, hw, hh)]
    if mode == SplitMode.BT_H:
        return [BlockRect(x, y, w, h // 2), BlockRect(x, y + h // 2, w, h // 2)]
    if mode == SplitMode.BT_V:
        return [BlockRect(x, y, w // 2, h), BlockRect(x + w // 2, y, w // 2, h)]
    if mode in (SplitMode.UQT_H1, SplitMode.UQT_H2):
        parts = _UQT_FIRST if mode == SplitMode.UQT_H1 else _UQT_SECOND
        return [BlockRect(x, y + off, w, size) for off, size in _cuts(h, parts)]
    parts = _UQT_FIRST if mode == SplitMode.UQT_V1 else _UQT_SECOND
    return [BlockRect(x + off, y, size, h) for off, size in _cuts(w, parts)]


def allowed_modes(rect: BlockRect, min_size: int = DEFAULT_MIN_SIZE,
                  max_depth_budget: int = DEFAULT_MAX_DEPTH) -> set[SplitMode]:
    """Legal modes for ``rect`` given the smallest block side and remaining depth."""
    return set(_allowed(rect.w, rect.h, min_size, max_depth_budget > 0))


@lru_cache(maxsize=None)
def _allowed(w: int, h: int, min_size: int, has_budget: bool) -> frozenset:
    if not (_is_pow2(w) and _is_pow2(h)):
        raise InvalidArgumentError(f"block {w}x{h} is not power-of-two sized")
    modes = {SplitMode.NONE}
    if not has_budget:
        return frozenset(modes)
    if h // 2 >= min_size:
        modes.add(SplitMode.BT_H)
    if w // 2 >= min_size:
        modes.add(SplitMode.BT_V)
    if w == h and w // 2 >= min_size:
        modes.add(SplitMode.QT)
    if h // 8 >= min_size:
        modes.update((SplitMode.UQT_H1, SplitMode.UQT_H2))
    if w // 8 >= min_size:
        modes.update((SplitMode.UQT_V1, SplitMode.UQT_V2))
    return frozenset(modes)


def split(rect: BlockRect, mode: SplitMode, min_size: int = 1) -> list[BlockRect]:
    """Sub-blocks of ``rect`` in canonical order (top to bottom, left to right)."""
    mode = SplitMode(mode)
    if mode != SplitMode.NONE and mode not in allowed_modes(rect, min_size, 1):
        raise InvalidArgumentError(f"{mode.name} is not legal for a {rect.w}x{rect.h} block")
    return _geometric(rect, mode)


def split_candidates(rect: BlockRect, min_size: int, depth_left: int) -> list[SplitMode]:
    """Geometrically possible splits in binarization order.

    The mode index is binarized over this list whatever tools are enabled, so
    a QT or BT split costs the same bins with or without UQT.
    """
    return list(_candidates(rect.w, rect.h, min_size, depth_left > 0))


@lru_cache(maxsize=None)
def _candidates(w: int, h: int, min_size: int, has_budget: bool) -> tuple:
    allowed = _allowed(w, h, min_size, has_budget)
    return tuple(m for m in SPLIT_ORDER if m in allowed)


def legal_splits(rect: BlockRect, mode_set, min_size: int, depth_left: int) -> list[SplitMode]:
    """Split modes the encoder may choose at a node, in binarization order."""
    return [m for m in split_candidates(rect, min_size, depth_left) if m in mode_set]


@dataclass
class PartitionNode:
    rect: BlockRect
    mode: SplitMode = SplitMode.NONE
    children: list[PartitionNode] = field(default_factory=list)
    # per-leaf coding data attached by the encoder/decoder
    leaf: object = field(default=None, compare=False, repr=False)

    def leaves(self):
        if self.mode == SplitMode.NONE:
            yield self
            return
        for c in self.children:
            yield from c.leaves()

    def depth(self) -> int:
        if self.mode == SplitMode.NONE:
            return 0
        return 1 + max(c.depth() for c in self.children)

    def structure(self):
        """Hashable (rect, mode, children) tuple, ignoring leaf payloads."""
        return (self.rect, int(self.mode), tuple(c.structure() for c in self.children))

    def is_valid(self) -> bool:
        if self.mode == SplitMode.NONE:
            return not self.children
        expected = _geometric(self.rect, self.mode)
        return [c.rect for c in self.children] == expected and all(c.is_valid() for c in self.children)


def build_tree(rect: BlockRect, chooser) -> PartitionNode:
    """Build a tree top-down; ``chooser(rect)`` returns the mode for each node."""
    mode = SplitMode(chooser(rect))
    node = PartitionNode(rect, mode)
    if mode != SplitMode.NONE:
        node.children = [build_tree(r, chooser) for r in split(rect, mode)]
    return node


def write_split(coder, ctx, rect: BlockRect, mode: SplitMode, legal: list[SplitMode]) -> None:
    """Split flag plus truncated-unary mode index over ``legal``."""
    if not legal:
        if mode != SplitMode.NONE:
            raise InvalidArgumentError("split coded where none is legal")
        return
    ac = area_class(rect.w, rect.h)
    coder.encode_bin(ctx, Contexts.SPLIT_FLAG + ac, mode != SplitMode.NONE)
    if mode == SplitMode.NONE:
        return
    idx = legal.index(mode)
    last = len(legal) - 1
    for k in range(min(idx + 1, last)):
        coder.encode_bin(ctx, Contexts.SPLIT_MODE + 4 * ac + min(k, 3), k < idx)


def read_split(decoder, ctx, rect: BlockRect, legal: list[SplitMode]) -> SplitMode:
    if not legal:
        return SplitMode.NONE
    ac = area_class(rect.w, rect.h)
    if not decoder.decode_bin(ctx, Contexts.SPLIT_FLAG + ac):
        return SplitMode.NONE
    last = len(legal) - 1
    idx = 0
    while idx < last and decoder.decode_bin(ctx, Contexts.SPLIT_MODE + 4 * ac + min(idx, 3)):
        idx += 1
    if idx > last:
        raise MalformedBitstreamError("split mode index beyond legal list")
    return legal[idx]


def write_tree(node: PartitionNode, coder, ctx, mode_set=ALL_SPLITS,
               min_size: int = DEFAULT_MIN_SIZE, max_depth: int = DEFAULT_MAX_DEPTH,
               leaf_writer=None) -> None:
    """Serialize ``node`` depth-first; ``leaf_writer(node)`` codes each leaf's payload."""

    def rec(n, depth_left):
        cands = split_candidates(n.rect, min_size, depth_left)
        if n.mode != SplitMode.NONE and (n.mode not in cands or n.mode not in mode_set):
            raise InvalidArgumentError(f"{n.mode.name} is not legal at {n.rect}")
        write_split(coder, ctx, n.rect, n.mode, cands)
        if n.mode == SplitMode.NONE:
            if leaf_writer is not None:
                leaf_writer(n)
            return
        for c in n.children:
            rec(c, depth_left - 1)

    rec(node, max_depth)


def read_tree(rect: BlockRect, decoder, ctx, mode_set=ALL_SPLITS,
              min_size: int = DEFAULT_MIN_SIZE, max_depth: int = DEFAULT_MAX_DEPTH,
              leaf_reader=None) -> PartitionNode:
    def rec(r, depth_left):
        mode = read_split(decoder, ctx, r, split_candidates(r, min_size, depth_left))
        if mode != SplitMode.NONE and mode not in mode_set:
            raise MalformedBitstreamError(f"{mode.name} split used but the tool is disabled")
        node = PartitionNode(r, mode)
        if mode == SplitMode.NONE:
            if leaf_reader is not None:
                node.leaf = leaf_reader(node)
            return node
        node.children = [rec(c, depth_left - 1) for c in _geometric(r, mode)]
        return node

    return rec(rect, max_depth)


def reachable_rects(root: BlockRect, mode_set, min_size: int, max_depth: int) -> dict[BlockRect, int]:
    """Every rect reachable from ``root`` mapped to its maximal remaining depth budget."""
    best = {root: max_depth}
    queue = deque([root])
    while queue:
        r = queue.popleft()
        d = best[r]
        for m in legal_splits(r, mode_set, min_size, d):
            for c in _geometric(r, m):
                if best.get(c, -1) < d - 1:
                    best[c] = d - 1
                    queue.append(c)
    return best


def min_depth_to_shape(target: BlockRect, mode_set, root: BlockRect | None = None,
                       min_size: int = 1, max_depth: int | None = None) -> int | None:
    """Fewest splits leading from ``root`` to a node equal to ``target``.

    Breadth-first over split applications; returns None when unreachable
    (within ``max_depth`` splits, if given).
    """
    root = root or BlockRect(0, 0, CTU_SIZE, CTU_SIZE)
    if not (_is_pow2(target.w) and _is_pow2(target.h)):
        raise InvalidArgumentError("target must have power-of-two dimensions")
    mode_set = frozenset(mode_set) - {SplitMode.NONE}
    seen = {root: 0}
    queue = deque([root])
    while queue:
        r = queue.popleft()
        d = seen[r]
        if r == target:
            return d
        if max_depth is not None and d >= max_depth:
            continue
        for m in SPLIT_ORDER:
            if m not in mode_set or m not in allowed_modes(r, min_size, 1):
                continue
            for c in _geometric(r, m):
                if c not in seen:
                    seen[c] = d + 1
                    queue.append(c)
    return None


def reachable_within(mode_set, depth: int, root: BlockRect | None = None,
                     min_size: int = 1) -> dict[BlockRect, int]:
    """All rects reachable in at most ``depth`` splits with their minimal split count."""
    root = root or BlockRect(0, 0, CTU_SIZE, CTU_SIZE)
    mode_set = frozenset(mode_set) - {SplitMode.NONE}
    seen = {root: 0}
    queue = deque([root])
    while queue:
        r = queue.popleft()
        d = seen[r]
        if d >= depth:
            continue
        for m in SPLIT_ORDER:
            if m not in mode_set or m not in allowed_modes(r, min_size, 1):
                continue
            for c in _geometric(r, m):
                if c not in seen:
                    seen[c] = d + 1
                    queue.append(c)
    return seen


def uqt_witnesses(depth: int = 3, root: BlockRect | None = None, min_size: int = 1):
    """Rects reachable with UQT in k splits that QT+BT cannot reach in k splits."""
    with_uqt = reachable_within(ALL_SPLITS, depth, root, min_size)
    without = reachable_within(QT_BT, depth, root, min_size)
    return sorted(
        (r, k) for r, k in with_uqt.items() if r not in without or without[r] > k
    )
