"""Integer block transform, scalar quantization and residual coefficient syntax.

The 1-D transform is an integer-to-integer DCT-II built from lifting steps,
so ``inverse_transform(forward_transform(x)) == x`` exactly. The recursion
splits an N-point DCT-II into an N/2-point DCT-II on pairwise sums and an
N/2-point DCT-IV on pairwise differences:

* each (x[n], x[N-1-n]) pair goes through an integer S-transform
  (d = a - b, s = b + floor(d / 2)), which keeps constant inputs exact;
* the DCT-IV is factored into Givens rotations, each realised as three
  lifting steps with multipliers -t and 2t / (1 + t^2), t = tan(angle / 2),
  all held with ``LIFT_BITS`` fractional bits and applied with a rounding
  shift.

Coefficient k of an N-point transform therefore carries a scale of
``sqrt(2) ** exps[k]`` relative to the orthonormal DCT-II: the S-transform
sum is 1/sqrt(2) of an orthonormal butterfly, the difference sqrt(2) times.
The quantizer absorbs this by indexing each coefficient's step with
``qp + 3 * (row_exp + col_exp)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from uvc import kernels
from uvc.bitstream import COST_ONE_BIT, COST0, COST1, Contexts, ue_length
from uvc.errors import InvalidArgumentError

LIFT_BITS = 16
SUPPORTED_SIZES = (2, 4, 8, 16, 32, 64)
MAX_LEVEL = 32767
QP_MIN, QP_MAX = 0, 51

# Qstep(qp) = 2 ** ((qp - 4) / 6): mantissa for (qp - 4) % 6, 14 fractional bits
QSTEP_SHIFT = 14
QSTEP_MANTISSA = tuple(round(2 ** (k / 6) * (1 << QSTEP_SHIFT)) for k in range(6))

DEADZONE_INTRA = 2  # sixths: 1/3
DEADZONE_INTER = 1  # 1/6

SIG_CLASS_BOUNDS = np.array([1, 3, 6, 10, 15, 28, 64, 256])


def _dct4_matrix(m: int) -> np.ndarray:
    n = np.arange(m)
    return math.sqrt(2.0 / m) * np.cos(np.pi * np.outer(2 * n + 1, 2 * n + 1) / (4 * m))


def _lift_rotation(ops, p: int, q: int, phi: float) -> None:
    """Append lifting steps rotating (x_p, x_q) by ``phi``."""
    if abs(phi) > math.pi / 2:
        ops.append((1, p, 0, 0, 0))
        ops.append((1, q, 0, 0, 0))
        phi -= math.copysign(math.pi, phi)
    one = 1 << LIFT_BITS
    t = round(math.tan(phi / 2) * one)
    if t == 0:
        return
    # sin of the angle whose half-tangent is exactly t / one
    s = round(2 * t * one * one / (one * one + t * t))
    ops.append((2, p, q, -t, LIFT_BITS))
    ops.append((2, q, p, s, LIFT_BITS))
    ops.append((2, p, q, -t, LIFT_BITS))


def _givens_program(a: np.ndarray, pos: list[int]) -> list[tuple]:
    """Lifting program computing ``a @ x`` for an orthogonal matrix ``a``."""
    a = a.copy()
    m = a.shape[0]
    rots = []
    for j in range(m):
        for i in range(m - 1, j, -1):
            if abs(a[i, j]) < 1e-14:
                continue
            theta = math.atan2(a[i, j], a[j, j])
            c, s = math.cos(theta), math.sin(theta)
            rj, ri = a[j].copy(), a[i].copy()
            a[j] = c * rj + s * ri
            a[i] = -s * rj + c * ri
            rots.append((j, i, theta))
    ops = [(1, pos[k], 0, 0, 1) for k in range(m) if a[k, k] < 0]
    for j, i, theta in reversed(rots):
        _lift_rotation(ops, pos[j], pos[i], theta)
    return ops


def _dct2_program(pos: list[int], ops: list) -> tuple[list[int], list[int]]:
    """Emit ops for a DCT-II over working positions ``pos``.

    Returns (output positions in coefficient order, sqrt(2) exponents).
    """
    n = len(pos)
    if n == 1:
        return list(pos), [0]
    half = n // 2
    for k in range(half):
        ops.append((0, pos[k], pos[n - 1 - k], 0, 0))
    even_pos, even_exp = _dct2_program([pos[k] for k in range(half)], ops)
    odd_in = [pos[n - 1 - k] for k in range(half)]
    if half == 1:
        odd_pos = odd_in
    else:
        ops.extend(_givens_program(_dct4_matrix(half), odd_in))
        odd_pos = odd_in
    out_pos, out_exp = [], []
    for k in range(half):
        out_pos += [even_pos[k], odd_pos[k]]
        out_exp += [even_exp[k] - 1, 1]
    return out_pos, out_exp


@dataclass(frozen=True)
class LiftingProgram:
    size: int
    ops: np.ndarray  # (m, 5) int64: kind, i, j, multiplier, shift
    perm: np.ndarray  # coefficient k lives at working position perm[k]
    exps: np.ndarray  # coefficient scale is sqrt(2) ** exps[k]


@lru_cache(maxsize=None)
def program(n: int) -> LiftingProgram:
    if n not in SUPPORTED_SIZES:
        raise InvalidArgumentError(f"unsupported transform size {n}")
    ops: list = []
    perm, exps = _dct2_program(list(range(n)), ops)
    arr = np.array(ops, dtype=np.int64).reshape(-1, 5)
    return LiftingProgram(n, np.ascontiguousarray(arr), np.array(perm), np.array(exps))


def _check_shape(h: int, w: int) -> None:
    if h not in SUPPORTED_SIZES or w not in SUPPORTED_SIZES:
        raise InvalidArgumentError(f"unsupported transform size {w}x{h}")


def _rows_forward(data: np.ndarray, prog: LiftingProgram) -> np.ndarray:
    kernels.lift_forward(data, prog.ops)
    return data[:, prog.perm]


def _rows_inverse(coeffs: np.ndarray, prog: LiftingProgram) -> np.ndarray:
    data = np.empty_like(coeffs)
    data[:, prog.perm] = coeffs
    data = np.ascontiguousarray(data)
    kernels.lift_inverse(data, prog.ops)
    return data


def forward_transform(block) -> np.ndarray:
    """2-D forward transform of a (h, w) block or an (n, h, w) batch."""
    arr = np.asarray(block, dtype=np.int64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    n, h, w = arr.shape
    _check_shape(h, w)
    rows = arr.reshape(n * h, w).copy()
    rows = _rows_forward(rows, program(w)).reshape(n, h, w)
    cols = np.ascontiguousarray(rows.transpose(0, 2, 1).reshape(n * w, h))
    cols = _rows_forward(cols, program(h)).reshape(n, w, h)
    out = np.ascontiguousarray(cols.transpose(0, 2, 1))
    return out[0] if single else out


def inverse_transform(coeffs) -> np.ndarray:
    arr = np.asarray(coeffs, dtype=np.int64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    n, h, w = arr.shape
    _check_shape(h, w)
    cols = np.ascontiguousarray(arr.transpose(0, 2, 1).reshape(n * w, h))
    cols = _rows_inverse(cols, program(h)).reshape(n, w, h)
    rows = np.ascontiguousarray(cols.transpose(0, 2, 1).reshape(n * h, w))
    out = _rows_inverse(rows, program(w)).reshape(n, h, w)
    return out[0] if single else out


@lru_cache(maxsize=None)
def scale_exponents(h: int, w: int) -> np.ndarray:
    """Per-coefficient sqrt(2) exponent of the 2-D transform, shape (h, w)."""
    _check_shape(h, w)
    return program(h).exps[:, None] + program(w).exps[None, :]


def normalized(coeffs: np.ndarray) -> np.ndarray:
    """Coefficients rescaled to the orthonormal DCT-II."""
    h, w = coeffs.shape[-2:]
    return coeffs * 2.0 ** (-scale_exponents(h, w) / 2.0)


def qp_offsets(h: int, w: int) -> np.ndarray:
    """QP offset applied to every coefficient so one QP means one step in orthonormal units."""
    return 3 * scale_exponents(h, w)


def qstep(qp) -> float:
    return 2.0 ** ((qp - 4) / 6.0)


def _step_parts(qp):
    q = np.asarray(qp, dtype=np.int64) - 4
    a = np.floor_divide(q, 6)
    mant = np.asarray(QSTEP_MANTISSA, dtype=np.int64)[np.mod(q, 6)]
    return a, mant


def quantize(coeffs, qp, intra: bool = True, offsets=None) -> np.ndarray:
    """Dead-zone scalar quantizer: sign(c) * floor(|c| / Qstep + f).

    ``qp`` and ``intra`` may be scalars or broadcastable arrays; ``offsets``
    (default zero) is added per coefficient. f is 1/3 for intra and 1/6 for
    inter blocks.
    """
    c = np.asarray(coeffs, dtype=np.int64)
    q = np.asarray(qp, dtype=np.int64)
    if offsets is not None:
        q = q + offsets
    a, mant = _step_parts(q)
    fn = np.where(np.asarray(intra, dtype=bool), DEADZONE_INTRA, DEADZONE_INTER)
    mag = np.abs(c)
    pos_a = np.maximum(a, 0)
    neg_a = np.maximum(-a, 0)
    num = ((6 * mag) << QSTEP_SHIFT << neg_a) + ((fn * mant) << pos_a)
    den = (6 * mant) << pos_a
    level = np.minimum(num // den, MAX_LEVEL)
    return np.where(c < 0, -level, level).astype(np.int32)


def dequantize(levels, qp, offsets=None) -> np.ndarray:
    lv = np.asarray(levels, dtype=np.int64)
    q = np.asarray(qp, dtype=np.int64)
    if offsets is not None:
        q = q + offsets
    a, mant = _step_parts(q)
    shift = QSTEP_SHIFT - a  # a <= 8 for every supported qp, so shift > 0
    mag = (np.abs(lv) * mant + (np.int64(1) << (shift - 1))) >> shift
    return np.where(lv < 0, -mag, mag)


@lru_cache(maxsize=None)
def scan_order(h: int, w: int) -> np.ndarray:
    """Zig-zag scan as flat row-major indices."""
    order = sorted(
        ((y, x) for y in range(h) for x in range(w)),
        key=lambda p: (p[0] + p[1], -p[1] if (p[0] + p[1]) % 2 else p[1]),
    )
    return np.array([y * w + x for y, x in order], dtype=np.int64)


@lru_cache(maxsize=None)
def sig_contexts(h: int, w: int, chroma: bool) -> np.ndarray:
    """Context index of every scan position's significance flag."""
    cls = np.searchsorted(SIG_CLASS_BOUNDS, np.arange(h * w), side="right")
    base = Contexts.SIG + (Contexts.SIG_CLASSES if chroma else 0)
    return (base + cls).astype(np.int32)


def to_scan(levels: np.ndarray) -> np.ndarray:
    h, w = levels.shape[-2:]
    flat = levels.reshape(*levels.shape[:-2], h * w)
    return np.ascontiguousarray(flat[..., scan_order(h, w)], dtype=np.int32)


def from_scan(scanned: np.ndarray, h: int, w: int) -> np.ndarray:
    out = np.zeros(h * w, dtype=np.int32)
    out[scan_order(h, w)] = scanned
    return out.reshape(h, w)


def code_residual(levels: np.ndarray, coder, ctx, chroma: bool = False) -> None:
    """Coded-block flag, then per scan position: significance, sign, |level| - 1."""
    h, w = levels.shape
    cbf_idx = Contexts.CBF_CHROMA if chroma else Contexts.CBF_LUMA
    coder.encode_residual(to_scan(levels), ctx, cbf_idx, sig_contexts(h, w, chroma))


def parse_residual(decoder, ctx, h: int, w: int, chroma: bool = False) -> np.ndarray:
    cbf_idx = Contexts.CBF_CHROMA if chroma else Contexts.CBF_LUMA
    scanned = decoder.decode_residual(h * w, ctx, cbf_idx, sig_contexts(h, w, chroma))
    return from_scan(np.asarray(scanned), h, w)


def residual_rate(levels: np.ndarray, ctx, chroma: bool = False) -> np.ndarray:
    """Frozen-context cost of :func:`code_residual` for a batch (n, h, w), in 1/32768 bits."""
    n, h, w = levels.shape
    cbf_idx = Contexts.CBF_CHROMA if chroma else Contexts.CBF_LUMA
    scanned = to_scan(levels).astype(np.int64)
    nz = scanned != 0
    cbf = nz.any(axis=1)
    states = np.asarray(ctx)[sig_contexts(h, w, chroma)]
    sig_cost = np.where(nz, COST1[states][None, :], COST0[states][None, :]).sum(axis=1)
    mag = np.abs(scanned)
    lvl_cost = np.where(nz, (1 + ue_length(np.maximum(mag - 1, 0))) * COST_ONE_BIT, 0).sum(axis=1)
    state = int(ctx[cbf_idx])
    return np.where(cbf, COST1[state] + sig_cost + lvl_cost, COST0[state])
