"""Pure-Python/numpy implementations of the routines in ``_kernels.pyx``.

Results are bit-identical to the compiled versions; only speed differs.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from uvc.errors import MalformedBitstreamError

PROB_BITS = 15
PROB_ONE = 1 << PROB_BITS
ADAPT_SHIFT = 5
TOP = 1 << 24
MAX_UE_PREFIX = 32
MAX_LEVEL = 32767


def lift_forward(data, ops):
    for kind, i, j, num, shift in ops.tolist():
        if kind == 0:
            d = data[:, i] - data[:, j]
            data[:, i] = data[:, j] + (d >> 1)
            data[:, j] = d
        elif kind == 1:
            data[:, i] = -data[:, i]
        else:
            data[:, i] += (num * data[:, j] + (1 << (shift - 1))) >> shift


def lift_inverse(data, ops):
    for kind, i, j, num, shift in reversed(ops.tolist()):
        if kind == 0:
            s = data[:, i].copy()
            d = data[:, j].copy()
            b = s - (d >> 1)
            data[:, i] = d + b
            data[:, j] = b
        elif kind == 1:
            data[:, i] = -data[:, i]
        else:
            data[:, i] -= (num * data[:, j] + (1 << (shift - 1))) >> shift


def error_integrals(cur, ref, search_range, squared):
    h, w = cur.shape
    side = 2 * search_range + 1
    win = sliding_window_view(ref.astype(np.int64), (h, w))[:side, :side]
    diff = win - cur.astype(np.int64)
    err = diff * diff if squared else np.abs(diff)
    err = err.reshape(side * side, h, w)
    out = np.zeros((side * side, h + 1, w + 1), dtype=np.int64)
    out[:, 1:, 1:] = err.cumsum(axis=1).cumsum(axis=2)
    return out


class ArithEncoder:
    def __init__(self):
        self.low = 0
        self.rng = 0xFFFFFFFF
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.bins = 0

    def _shift_low(self):
        if (self.low & 0xFFFFFFFF) < 0xFF000000 or (self.low >> 32) != 0:
            temp = self.cache
            carry = self.low >> 32
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def _normalize(self):
        while self.rng < TOP:
            self.rng = (self.rng << 8) & 0xFFFFFFFF
            self._shift_low()

    def encode_bin(self, ctx, idx, b):
        s = int(ctx[idx])
        bound = (self.rng >> PROB_BITS) * s
        if not b:
            self.rng = bound
            s = min(s + ((PROB_ONE - s) >> ADAPT_SHIFT), PROB_ONE - 2)
        else:
            self.low += bound
            self.rng -= bound
            s = max(s - ((s + (1 << ADAPT_SHIFT) - 1) >> ADAPT_SHIFT), 1)
        ctx[idx] = s
        self.bins += 1
        self._normalize()

    def encode_bypass(self, b):
        self.rng >>= 1
        if b:
            self.low += self.rng
        self.bins += 1
        self._normalize()

    def encode_bits(self, value, n):
        for i in range(n - 1, -1, -1):
            self.encode_bypass((value >> i) & 1)

    def encode_ue(self, v):
        x = v + 1
        nbits = x.bit_length() - 1
        for _ in range(nbits):
            self.encode_bypass(0)
        for i in range(nbits, -1, -1):
            self.encode_bypass((x >> i) & 1)

    def encode_se(self, v):
        self.encode_ue(2 * v - 1 if v > 0 else -2 * v)

    def encode_residual(self, levels, ctx, cbf_idx, sig_idx):
        levels = levels.tolist()
        cbf = any(levels)
        self.encode_bin(ctx, cbf_idx, cbf)
        if not cbf:
            return
        for lv, sc in zip(levels, sig_idx.tolist()):
            if lv == 0:
                self.encode_bin(ctx, sc, 0)
            else:
                self.encode_bin(ctx, sc, 1)
                self.encode_bypass(lv < 0)
                self.encode_ue(abs(lv) - 1)

    def finish(self):
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class ArithDecoder:
    def __init__(self, data, start=0, end=None, base_offset=0):
        self.buf = bytes(data)
        self.start = start
        self.end = len(self.buf) if end is None else end
        self.pos = start
        self.base_offset = base_offset
        self.rng = 0xFFFFFFFF
        self.code = 0
        if self._next() != 0:
            raise MalformedBitstreamError("bad arithmetic-coder start byte",
                                          self.base_offset + self.pos - 1)
        for _ in range(4):
            self.code = (self.code << 8) | self._next()
        if self.code == 0xFFFFFFFF:
            raise MalformedBitstreamError("arithmetic-coder state out of range",
                                          self.base_offset + self.pos)

    def _next(self):
        if self.pos >= self.end:
            raise MalformedBitstreamError("truncated arithmetic-coded data",
                                          self.base_offset + self.pos)
        v = self.buf[self.pos]
        self.pos += 1
        return v

    def _normalize(self):
        while self.rng < TOP:
            self.rng = (self.rng << 8) & 0xFFFFFFFF
            self.code = ((self.code << 8) | self._next()) & 0xFFFFFFFF
        if self.code >= self.rng:
            raise MalformedBitstreamError("arithmetic decoder underflow",
                                          self.base_offset + self.pos)

    def decode_bin(self, ctx, idx):
        s = int(ctx[idx])
        bound = (self.rng >> PROB_BITS) * s
        if self.code < bound:
            self.rng = bound
            s = min(s + ((PROB_ONE - s) >> ADAPT_SHIFT), PROB_ONE - 2)
            b = 0
        else:
            self.code -= bound
            self.rng -= bound
            s = max(s - ((s + (1 << ADAPT_SHIFT) - 1) >> ADAPT_SHIFT), 1)
            b = 1
        ctx[idx] = s
        self._normalize()
        return b

    def decode_bypass(self):
        self.rng >>= 1
        b = 0
        if self.code >= self.rng:
            self.code -= self.rng
            b = 1
        self._normalize()
        return b

    def decode_bits(self, n):
        v = 0
        for _ in range(n):
            v = (v << 1) | self.decode_bypass()
        return v

    def decode_ue(self):
        zeros = 0
        while self.decode_bypass() == 0:
            zeros += 1
            if zeros > MAX_UE_PREFIX:
                raise MalformedBitstreamError("exp-Golomb prefix too long",
                                              self.base_offset + self.pos)
        x = 1
        for _ in range(zeros):
            x = (x << 1) | self.decode_bypass()
        return x - 1

    def decode_se(self):
        k = self.decode_ue()
        return (k + 1) >> 1 if k & 1 else -(k >> 1)

    def decode_residual(self, n, ctx, cbf_idx, sig_idx):
        out = np.zeros(n, dtype=np.int32)
        if not self.decode_bin(ctx, cbf_idx):
            return out
        for k, sc in enumerate(sig_idx.tolist()):
            if self.decode_bin(ctx, sc):
                neg = self.decode_bypass()
                mag = self.decode_ue() + 1
                if mag > MAX_LEVEL:
                    raise MalformedBitstreamError("coefficient level overflow",
                                                  self.base_offset + self.pos)
                out[k] = -mag if neg else mag
        return out

    def consumed(self):
        return self.pos - self.start
