"""Bit-level serialization and the context-adaptive binary arithmetic coder.

Plain fixed-width and exp-Golomb fields go through :class:`BitSink` /
:class:`BitSource`. Everything else is coded as bins with
:class:`ArithEncoder` / :class:`ArithDecoder` (compiled when available).
Probability states hold P(bin == 0) in 1/32768 units and adapt with a shift
of 5 after every context-coded bin.
"""

from __future__ import annotations

import math

import numpy as np

from uvc.errors import MalformedBitstreamError
from uvc.kernels import ArithDecoder, ArithEncoder

__all__ = [
    "ArithDecoder",
    "ArithEncoder",
    "BitSink",
    "BitSource",
    "CONTEXT_INIT",
    "COST_ONE_BIT",
    "Contexts",
    "RateCounter",
    "bin_cost",
    "update_state",
    "ue_length",
]

PROB_BITS = 15
PROB_ONE = 1 << PROB_BITS
ADAPT_SHIFT = 5
CONTEXT_INIT = PROB_ONE // 2
# Rates are tracked as integers in units of 1/32768 bit so sums are exact.
COST_SHIFT = 15
COST_ONE_BIT = 1 << COST_SHIFT


def update_state(state: int, b: int) -> int:
    if b:
        return max(state - ((state + (1 << ADAPT_SHIFT) - 1) >> ADAPT_SHIFT), 1)
    return min(state + ((PROB_ONE - state) >> ADAPT_SHIFT), PROB_ONE - 2)


def _cost_tables():
    p = np.arange(PROB_ONE + 1, dtype=np.float64) / PROB_ONE
    with np.errstate(divide="ignore"):
        c0 = -np.log2(p) * COST_ONE_BIT
        c1 = -np.log2(1.0 - p) * COST_ONE_BIT
    c0[0] = c1[-1] = 64 * COST_ONE_BIT
    return np.rint(c0).astype(np.int64), np.rint(c1).astype(np.int64)


COST0, COST1 = _cost_tables()


def bin_cost(state, b):
    """Cost of coding bin ``b`` with probability state ``state`` (1/32768 bit units)."""
    return COST1[state] if b else COST0[state]


def ue_length(v):
    """Length in bits of the order-0 exp-Golomb code of ``v`` (vectorised)."""
    v = np.asarray(v, dtype=np.int64)
    return 2 * np.floor(np.log2(v + 1)).astype(np.int64) + 1


class BitSink:
    """Append-only MSB-first bit writer."""

    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0

    def write_bit(self, b: int) -> None:
        self._acc = (self._acc << 1) | (1 if b else 0)
        self._nbits += 1
        if self._nbits == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._nbits = 0

    def write_bits(self, value: int, n: int) -> None:
        if value < 0 or value >> n:
            raise ValueError(f"{value} does not fit in {n} bits")
        for i in range(n - 1, -1, -1):
            self.write_bit((value >> i) & 1)

    def write_ue(self, value: int) -> None:
        if value < 0:
            raise ValueError("exp-Golomb codes need a non-negative value")
        x = value + 1
        nbits = x.bit_length() - 1
        self.write_bits(0, nbits)
        self.write_bits(x, nbits + 1)

    def write_se(self, value: int) -> None:
        self.write_ue(2 * value - 1 if value > 0 else -2 * value)

    @property
    def bit_length(self) -> int:
        return 8 * len(self._bytes) + self._nbits

    def align(self) -> None:
        """Pad with zero bits up to the next byte boundary."""
        while self._nbits:
            self.write_bit(0)

    def getvalue(self) -> bytes:
        if self._nbits:
            return bytes(self._bytes) + bytes([self._acc << (8 - self._nbits)])
        return bytes(self._bytes)


class BitSource:
    """Reader for data produced by :class:`BitSink`."""

    def __init__(self, data: bytes, start: int = 0, end: int | None = None, base_offset: int = 0):
        self._data = data
        self._pos = start * 8
        self._end = (len(data) if end is None else end) * 8
        self._base = base_offset

    def read_bit(self) -> int:
        if self._pos >= self._end:
            raise MalformedBitstreamError("truncated bit field", self._base + self._pos // 8)
        byte = self._data[self._pos >> 3]
        b = (byte >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return b

    def read_bits(self, n: int) -> int:
        v = 0
        for _ in range(n):
            v = (v << 1) | self.read_bit()
        return v

    def read_ue(self) -> int:
        zeros = 0
        while self.read_bit() == 0:
            zeros += 1
            if zeros > 32:
                raise MalformedBitstreamError("exp-Golomb prefix too long", self._base + self._pos // 8)
        return ((1 << zeros) | self.read_bits(zeros)) - 1

    def read_se(self) -> int:
        k = self.read_ue()
        return (k + 1) >> 1 if k & 1 else -(k >> 1)

    def align(self) -> None:
        self._pos = (self._pos + 7) & ~7

    @property
    def byte_pos(self) -> int:
        return (self._pos + 7) >> 3


class RateCounter:
    """Coder stand-in that prices bins against a frozen copy of the contexts.

    Exposes the encoder's write interface; ``bits`` accumulates cost in
    1/32768-bit units. Context states are read but never updated, which makes
    a block's price independent of what was priced before it.
    """

    def __init__(self):
        self.bits = 0

    def encode_bin(self, ctx, idx, b):
        self.bits += int(COST1[ctx[idx]] if b else COST0[ctx[idx]])

    def encode_bypass(self, b):
        self.bits += COST_ONE_BIT

    def encode_bits(self, value, n):
        self.bits += n * COST_ONE_BIT

    def encode_ue(self, v):
        self.bits += (2 * (v + 1).bit_length() - 1) * COST_ONE_BIT

    def encode_se(self, v):
        self.encode_ue(2 * v - 1 if v > 0 else -2 * v)

    def encode_residual(self, levels, ctx, cbf_idx, sig_idx):
        levels = np.asarray(levels)
        nz = levels != 0
        cbf = bool(nz.any())
        self.encode_bin(ctx, cbf_idx, cbf)
        if not cbf:
            return
        states = np.asarray(ctx)[sig_idx]
        self.bits += int(np.where(nz, COST1[states], COST0[states]).sum())
        mags = np.abs(levels[nz]).astype(np.int64)
        self.bits += int((1 + ue_length(mags - 1)).sum()) * COST_ONE_BIT


class Contexts:
    """Named layout of every adaptive probability state used by the syntax."""

    # area classes for partition syntax: <=64, <=256, <=1024, >1024 samples
    SPLIT_FLAG = 0
    SPLIT_MODE = 4  # 4 area classes x 4 bin positions
    PRED_MODE = 20
    REF_IDX = 21
    CBF_LUMA = 22
    CBF_CHROMA = 23
    SIG = 24  # 2 channel types x SIG_CLASSES
    SIG_CLASSES = 9
    DQP = 42  # 2 truncated-unary magnitude bins
    NNLF_SLICE = 44  # luma, chroma
    NNLF_CTU = 46  # luma, chroma
    COUNT = 48

    @staticmethod
    def fresh() -> np.ndarray:
        return np.full(Contexts.COUNT, CONTEXT_INIT, dtype=np.int32)


def area_class(w: int, h: int) -> int:
    a = w * h
    if a <= 64:
        return 0
    if a <= 256:
        return 1
    if a <= 1024:
        return 2
    return 3


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))
