# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: lifting transform programs, the binary range coder with
residual coding, and motion-search error tables.

Every routine here has a bit-identical counterpart in ``_fallback.py``.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int32_t, int64_t, uint32_t, uint64_t

from uvc.errors import MalformedBitstreamError

cnp.import_array()

DEF PROB_BITS = 15
DEF PROB_ONE = 32768
DEF ADAPT_SHIFT = 5
DEF TOP = 16777216  # 1 << 24
DEF MAX_UE_PREFIX = 32
DEF MAX_LEVEL = 32767


DEF LIFT_TILE = 32  # rows per tile: one op is applied to the whole tile before the next


cdef void _lift_tile(int64_t* x, Py_ssize_t rows, Py_ssize_t w, const int64_t* ops, Py_ssize_t m,
                     bint inverse) noexcept nogil:
    cdef Py_ssize_t k, r, kk
    cdef const int64_t* op
    cdef int64_t a, b, d, t, mult, rnd, i, j
    cdef int64_t shift
    for kk in range(m):
        k = m - 1 - kk if inverse else kk
        op = ops + 5 * k
        i = op[1]
        j = op[2]
        if op[0] == 0:
            if inverse:
                for r in range(rows):
                    a = x[r * w + i]
                    d = x[r * w + j]
                    b = a - (d >> 1)
                    x[r * w + i] = d + b
                    x[r * w + j] = b
            else:
                for r in range(rows):
                    a = x[r * w + i]
                    b = x[r * w + j]
                    d = a - b
                    x[r * w + i] = b + (d >> 1)
                    x[r * w + j] = d
        elif op[0] == 1:
            for r in range(rows):
                x[r * w + i] = -x[r * w + i]
        else:
            mult = op[3]
            shift = op[4]
            rnd = (<int64_t>1) << (shift - 1)
            if inverse:
                for r in range(rows):
                    x[r * w + i] -= (mult * x[r * w + j] + rnd) >> shift
            else:
                for r in range(rows):
                    x[r * w + i] += (mult * x[r * w + j] + rnd) >> shift


cdef void _lift_all(int64_t[:, ::1] data, const int64_t[:, ::1] ops, bint inverse) noexcept nogil:
    cdef Py_ssize_t n = data.shape[0]
    cdef Py_ssize_t w = data.shape[1]
    cdef Py_ssize_t m = ops.shape[0]
    cdef Py_ssize_t r0, rows
    if n == 0 or m == 0:
        return
    r0 = 0
    while r0 < n:
        rows = LIFT_TILE if n - r0 > LIFT_TILE else n - r0
        _lift_tile(&data[r0, 0], rows, w, &ops[0, 0], m, inverse)
        r0 += rows


def lift_forward(int64_t[:, ::1] data, const int64_t[:, ::1] ops):
    """Run a lifting program over every row of ``data`` in place."""
    with nogil:
        _lift_all(data, ops, False)


def lift_inverse(int64_t[:, ::1] data, const int64_t[:, ::1] ops):
    """Undo :func:`lift_forward` exactly."""
    with nogil:
        _lift_all(data, ops, True)


def error_integrals(int32_t[:, ::1] cur, int32_t[:, ::1] ref, int search_range,
                    bint squared):
    """Summed-area tables of |cur - shifted ref| (or its square) per offset.

    ``ref`` is ``cur``'s co-located window padded by ``search_range`` on each
    side. Returns int64 array (K, h + 1, w + 1) with K = (2r + 1)**2 and
    offset index k = (dy + r) * (2r + 1) + (dx + r).
    """
    cdef Py_ssize_t h = cur.shape[0]
    cdef Py_ssize_t w = cur.shape[1]
    cdef Py_ssize_t side = 2 * search_range + 1
    out_arr = np.zeros((side * side, h + 1, w + 1), dtype=np.int64)
    cdef int64_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t oy, ox, k, y, x
    cdef int64_t row, d
    with nogil:
        for oy in range(side):
            for ox in range(side):
                k = oy * side + ox
                for y in range(h):
                    row = 0
                    for x in range(w):
                        d = cur[y, x] - ref[y + oy, x + ox]
                        if squared:
                            row += d * d
                        else:
                            row += d if d >= 0 else -d
                        out[k, y + 1, x + 1] = out[k, y, x + 1] + row
    return out_arr


cdef class ArithEncoder:
    """Binary range coder with 15-bit adaptive probabilities."""

    cdef uint64_t low
    cdef uint32_t rng
    cdef int cache
    cdef int64_t cache_size
    cdef bytearray out
    cdef public int64_t bins

    def __cinit__(self):
        self.low = 0
        self.rng = 0xFFFFFFFF
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.bins = 0

    cdef inline void _shift_low(self):
        cdef int temp
        if (self.low & 0xFFFFFFFF) < 0xFF000000 or (self.low >> 32) != 0:
            temp = self.cache
            while True:
                self.out.append((temp + <int>(self.low >> 32)) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = <int>((self.low >> 24) & 0xFF)
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    cdef inline void _bin(self, int32_t[::1] ctx, Py_ssize_t idx, int b):
        cdef int32_t s = ctx[idx]
        cdef uint32_t bound = (self.rng >> PROB_BITS) * <uint32_t>s
        if b == 0:
            self.rng = bound
            s += (PROB_ONE - s) >> ADAPT_SHIFT
            if s > PROB_ONE - 2:
                s = PROB_ONE - 2
        else:
            self.low += bound
            self.rng -= bound
            s -= (s + (1 << ADAPT_SHIFT) - 1) >> ADAPT_SHIFT
            if s < 1:
                s = 1
        ctx[idx] = s
        self.bins += 1
        while self.rng < TOP:
            self.rng <<= 8
            self._shift_low()

    cdef inline void _bypass(self, int b):
        self.rng >>= 1
        if b:
            self.low += self.rng
        self.bins += 1
        while self.rng < TOP:
            self.rng <<= 8
            self._shift_low()

    cdef inline void _ue(self, uint64_t v):
        cdef uint64_t x = v + 1
        cdef int nbits = 0
        cdef int i
        while (x >> nbits) > 1:
            nbits += 1
        for i in range(nbits):
            self._bypass(0)
        for i in range(nbits, -1, -1):
            self._bypass(<int>((x >> i) & 1))

    def encode_bin(self, int32_t[::1] ctx, Py_ssize_t idx, int b):
        self._bin(ctx, idx, 1 if b else 0)

    def encode_bypass(self, int b):
        self._bypass(1 if b else 0)

    def encode_bits(self, uint64_t value, int n):
        cdef int i
        for i in range(n - 1, -1, -1):
            self._bypass(<int>((value >> i) & 1))

    def encode_ue(self, uint64_t v):
        self._ue(v)

    def encode_se(self, int64_t v):
        self._ue(<uint64_t>(2 * v - 1) if v > 0 else <uint64_t>(-2 * v))

    def encode_residual(self, int32_t[::1] levels, int32_t[::1] ctx,
                        Py_ssize_t cbf_idx, int32_t[::1] sig_idx):
        cdef Py_ssize_t n = levels.shape[0]
        cdef Py_ssize_t k
        cdef int32_t lv
        cdef int cbf = 0
        for k in range(n):
            if levels[k] != 0:
                cbf = 1
                break
        self._bin(ctx, cbf_idx, cbf)
        if not cbf:
            return
        for k in range(n):
            lv = levels[k]
            if lv == 0:
                self._bin(ctx, sig_idx[k], 0)
            else:
                self._bin(ctx, sig_idx[k], 1)
                self._bypass(1 if lv < 0 else 0)
                self._ue(<uint64_t>((lv if lv > 0 else -lv) - 1))

    def finish(self):
        cdef int i
        for i in range(5):
            self._shift_low()
        return bytes(self.out)


cdef class ArithDecoder:
    """Decoder matching :class:`ArithEncoder` bin for bin."""

    cdef const unsigned char[::1] buf
    cdef Py_ssize_t pos
    cdef Py_ssize_t start
    cdef Py_ssize_t end
    cdef uint32_t rng
    cdef uint32_t code
    cdef public Py_ssize_t base_offset

    def __init__(self, data, Py_ssize_t start=0, end=None, Py_ssize_t base_offset=0):
        self.buf = data
        self.start = start
        self.end = len(data) if end is None else end
        self.pos = start
        self.base_offset = base_offset
        self.rng = 0xFFFFFFFF
        self.code = 0
        cdef int i
        if self._next() != 0:
            raise MalformedBitstreamError("bad arithmetic-coder start byte",
                                          self.base_offset + self.pos - 1)
        for i in range(4):
            self.code = (self.code << 8) | <uint32_t>self._next()
        if self.code == 0xFFFFFFFF:
            raise MalformedBitstreamError("arithmetic-coder state out of range",
                                          self.base_offset + self.pos)

    cdef inline int _next(self) except -1:
        if self.pos >= self.end:
            raise MalformedBitstreamError("truncated arithmetic-coded data",
                                          self.base_offset + self.pos)
        cdef int v = self.buf[self.pos]
        self.pos += 1
        return v

    cdef inline int _normalize(self) except -1:
        while self.rng < TOP:
            self.rng <<= 8
            self.code = (self.code << 8) | <uint32_t>self._next()
        if self.code >= self.rng:
            raise MalformedBitstreamError("arithmetic decoder underflow",
                                          self.base_offset + self.pos)
        return 0

    cdef inline int _bin(self, int32_t[::1] ctx, Py_ssize_t idx) except -1:
        cdef int32_t s = ctx[idx]
        cdef uint32_t bound = (self.rng >> PROB_BITS) * <uint32_t>s
        cdef int b
        if self.code < bound:
            self.rng = bound
            s += (PROB_ONE - s) >> ADAPT_SHIFT
            if s > PROB_ONE - 2:
                s = PROB_ONE - 2
            b = 0
        else:
            self.code -= bound
            self.rng -= bound
            s -= (s + (1 << ADAPT_SHIFT) - 1) >> ADAPT_SHIFT
            if s < 1:
                s = 1
            b = 1
        ctx[idx] = s
        self._normalize()
        return b

    cdef inline int _bypass(self) except -1:
        cdef int b = 0
        self.rng >>= 1
        if self.code >= self.rng:
            self.code -= self.rng
            b = 1
        self._normalize()
        return b

    cdef inline int64_t _ue(self) except -1:
        cdef int zeros = 0
        cdef int64_t x = 1
        cdef int i
        while self._bypass() == 0:
            zeros += 1
            if zeros > MAX_UE_PREFIX:
                raise MalformedBitstreamError("exp-Golomb prefix too long",
                                              self.base_offset + self.pos)
        for i in range(zeros):
            x = (x << 1) | self._bypass()
        return x - 1

    def decode_bin(self, int32_t[::1] ctx, Py_ssize_t idx):
        return self._bin(ctx, idx)

    def decode_bypass(self):
        return self._bypass()

    def decode_bits(self, int n):
        cdef uint64_t v = 0
        cdef int i
        for i in range(n):
            v = (v << 1) | <uint64_t>self._bypass()
        return v

    def decode_ue(self):
        return self._ue()

    def decode_se(self):
        cdef int64_t k = self._ue()
        if k & 1:
            return (k + 1) >> 1
        return -(k >> 1)

    def decode_residual(self, Py_ssize_t n, int32_t[::1] ctx, Py_ssize_t cbf_idx,
                        int32_t[::1] sig_idx):
        out_arr = np.zeros(n, dtype=np.int32)
        cdef int32_t[::1] out = out_arr
        cdef Py_ssize_t k
        cdef int neg
        cdef int64_t mag
        if not self._bin(ctx, cbf_idx):
            return out_arr
        for k in range(n):
            if self._bin(ctx, sig_idx[k]):
                neg = self._bypass()
                mag = self._ue() + 1
                if mag > MAX_LEVEL:
                    raise MalformedBitstreamError("coefficient level overflow",
                                                  self.base_offset + self.pos)
                out[k] = <int32_t>(-mag if neg else mag)
        return out_arr

    def consumed(self):
        return self.pos - self.start
