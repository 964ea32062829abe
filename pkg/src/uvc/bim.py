"""Block importance mapping: temporal prediction errors to per-CTU delta QP.

Each 8x8 block of a picture is matched (integer motion, minimal SSE)
against up to two past and two future source pictures. Blocks that future
pictures predict well are important, so their CTUs get a lower QP.
"""

from __future__ import annotations

import numpy as np

from uvc import kernels
from uvc.errors import InvalidArgumentError
from uvc.transform import qstep

BLOCK = 8
SEARCH_RANGE = 8
WINDOW = 2
DEFAULT_THRESHOLDS = (0.25, 0.45, 0.65, 0.85)
MAX_DELTA = 2


def _plane(p) -> np.ndarray:
    if hasattr(p, "y"):
        p = p.y
    return p.data if hasattr(p, "width") else np.asarray(p)


def block_errors(cur, ref, block: int = BLOCK, search_range: int = SEARCH_RANGE) -> np.ndarray:
    """Minimal SSE per block of ``cur`` over integer shifts of ``ref`` in [-r, r]^2."""
    cur = np.asarray(cur, dtype=np.int32)
    ref = np.asarray(ref, dtype=np.int32)
    h, w = cur.shape
    if ref.shape != cur.shape:
        raise InvalidArgumentError("window frames must share dimensions")
    if h % block or w % block:
        raise InvalidArgumentError(f"frame size must be a multiple of {block}")
    r = search_range
    padded = np.ascontiguousarray(np.pad(ref, r, mode="edge"), dtype=np.int32)
    t = kernels.error_integrals(np.ascontiguousarray(cur), padded, r, True)
    ys = np.arange(0, h + 1, block)
    xs = np.arange(0, w + 1, block)
    s = t[:, ys[:, None], xs[None, :]]
    sums = s[:, 1:, 1:] - s[:, :-1, 1:] - s[:, 1:, :-1] + s[:, :-1, :-1]
    return sums.min(axis=0)


def mctf_errors(frames, center: int, block: int = BLOCK, search_range: int = SEARCH_RANGE,
                window: int = WINDOW) -> dict[int, np.ndarray]:
    """Per-block minimal SSE of picture ``center`` against each neighbour in the window.

    Returns {offset: (H/block, W/block) map}; offsets are -2, -1, +1, +2
    where those pictures exist.
    """
    frames = list(frames)
    if not 0 <= center < len(frames):
        raise InvalidArgumentError("center index outside the window")
    cur = _plane(frames[center])
    out = {}
    for off in range(-window, window + 1):
        j = center + off
        if off == 0 or not 0 <= j < len(frames):
            continue
        out[off] = block_errors(cur, _plane(frames[j]), block, search_range)
    if not out:
        raise InvalidArgumentError("need at least one neighbouring frame")
    return out


def default_sigma(base_qp: int) -> float:
    return 2.0 * qstep(base_qp) / 3.0


def importance_from_errors(errors: dict[int, np.ndarray], ctu_size: int = 64, sigma: float = 1.0,
                           block: int = BLOCK) -> np.ndarray:
    """Per-CTU importance in (0, 1]: mean over blocks of sigma^2 / (sigma^2 + SSE/64),
    each block's weight averaged over the future-frame maps only."""
    if not sigma > 0:
        raise InvalidArgumentError("sigma must be positive")
    future = [np.asarray(m, dtype=np.float64) for off, m in sorted(errors.items()) if off > 0]
    if not future:
        raise InvalidArgumentError("importance needs at least one future frame")
    s2 = sigma * sigma
    w = np.mean([s2 / (s2 + m / (block * block)) for m in future], axis=0)
    k = ctu_size // block
    rows, cols = w.shape
    if rows % k or cols % k:
        raise InvalidArgumentError("block grid does not tile the CTU grid")
    return w.reshape(rows // k, k, cols // k, k).mean(axis=(1, 3))


def delta_qp_from_importance(importance, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """+2 below the first cut point down to -2 at or above the last."""
    t = np.asarray(thresholds, dtype=np.float64)
    if t.shape != (4,) or not np.all(np.diff(t) > 0) or t[0] <= 0 or t[-1] >= 1:
        raise InvalidArgumentError("thresholds must be 4 strictly ascending values in (0, 1)")
    imp = np.asarray(importance, dtype=np.float64)
    return (MAX_DELTA - np.searchsorted(t, imp, side="right")).astype(np.int64)


def picture_deltas(frames, poc: int, base_qp: int, ctu_size: int = 64, sigma: float | None = None,
                   thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Per-CTU deltas for one picture; pictures without a future neighbour get 0."""
    frames = list(frames)
    h, w = _plane(frames[poc]).shape
    if poc + 1 >= len(frames):
        return np.zeros((h // ctu_size, w // ctu_size), dtype=np.int64)
    errs = mctf_errors(frames, poc)
    imp = importance_from_errors(errs, ctu_size, default_sigma(base_qp) if sigma is None else sigma)
    return delta_qp_from_importance(imp, thresholds)
