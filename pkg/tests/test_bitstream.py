import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvc.bitstream import (
    CONTEXT_INIT,
    ArithDecoder,
    ArithEncoder,
    BitSink,
    BitSource,
    Contexts,
    RateCounter,
    update_state,
    ue_length,
)
from uvc.errors import MalformedBitstreamError


def _bits(sink):
    data = sink.getvalue()
    return "".join(f"{b:08b}" for b in data)[:sink.bit_length]


@pytest.mark.parametrize("value,code", [(0, "1"), (1, "010"), (2, "011"), (3, "00100"), (6, "00111")])
def test_ue_codewords(value, code):
    sink = BitSink()
    sink.write_ue(value)
    assert _bits(sink) == code


def test_ue_exhaustive_round_trip_and_length():
    sink = BitSink()
    for v in range(4096):
        sink.write_ue(v)
    src = BitSource(sink.getvalue())
    assert [src.read_ue() for _ in range(4096)] == list(range(4096))
    lengths = ue_length(np.arange(4096))
    assert np.array_equal(lengths, [2 * math.floor(math.log2(v + 1)) + 1 for v in range(4096)])


def test_fixed_width_fields_are_msb_first():
    sink = BitSink()
    sink.write_bits(0b1011, 4)
    sink.write_bits(0x5, 3)
    assert _bits(sink) == "1011101"


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["ue", "se", "bits"]), st.integers(-5000, 5000)), max_size=50))
def test_bit_sink_round_trip(fields):
    sink = BitSink()
    plan = []
    for kind, v in fields:
        if kind == "ue":
            v = abs(v)
            sink.write_ue(v)
        elif kind == "se":
            sink.write_se(v)
        else:
            v = abs(v) % 4096
            sink.write_bits(v, 12)
        plan.append((kind, v))
    src = BitSource(sink.getvalue())
    for kind, v in plan:
        got = src.read_ue() if kind == "ue" else src.read_se() if kind == "se" else src.read_bits(12)
        assert got == v


def test_truncated_ue_raises():
    sink = BitSink()
    sink.write_bits(0, 8)  # an unterminated prefix
    with pytest.raises(MalformedBitstreamError):
        BitSource(sink.getvalue()).read_ue()


def _spec_update(state, b):
    delta = (32768 - state) if b == 0 else -state
    return min(max(state + (delta >> 5), 1), 32766)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 32766), st.integers(0, 1))
def test_update_rule(state, b):
    new = update_state(state, b)
    assert new == _spec_update(state, b)
    assert 1 <= new <= 32766


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=3000))
def test_states_never_saturate(bins):
    ctx = Contexts.fresh()
    enc = ArithEncoder()
    for b in bins:
        enc.encode_bin(ctx, 0, b)
        assert 1 <= ctx[0] <= 32766


def test_constant_zero_run_is_cheap():
    ctx = Contexts.fresh()
    assert ctx[0] == CONTEXT_INIT == 16384
    enc = ArithEncoder()
    for _ in range(10_000):
        enc.encode_bin(ctx, 0, 0)
    assert 8 * len(enc.finish()) < 1500


def test_alternating_bins_cost_about_one_bit():
    ctx = Contexts.fresh()
    enc = ArithEncoder()
    for i in range(10_000):
        enc.encode_bin(ctx, 0, i & 1)
    assert 8 * len(enc.finish()) >= 9800


def _encode_decode(bins, idx):
    ctx = Contexts.fresh()
    enc = ArithEncoder()
    trace = []
    for b, i in zip(bins, idx):
        enc.encode_bin(ctx, i, b)
        trace.append(ctx.copy())
    data = enc.finish()
    dctx = Contexts.fresh()
    dec = ArithDecoder(data)
    out = []
    for k, i in enumerate(idx):
        out.append(dec.decode_bin(dctx, i))
        assert np.array_equal(dctx, trace[k])  # lockstep context states
    return out


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, Contexts.COUNT - 1)), max_size=400))
def test_bins_round_trip_in_lockstep(pairs):
    bins = [b for b, _ in pairs]
    idx = [i for _, i in pairs]
    assert _encode_decode(bins, idx) == bins


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), max_size=500))
def test_bypass_round_trip(bins):
    enc = ArithEncoder()
    for b in bins:
        enc.encode_bypass(b)
    dec = ArithDecoder(enc.finish())
    assert [dec.decode_bypass() for _ in bins] == bins


def test_residual_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(1, 65))
        levels = np.where(rng.random(n) < 0.3, rng.integers(-300, 301, n), 0).astype(np.int32)
        sig = rng.integers(Contexts.SIG, Contexts.SIG + 9, n).astype(np.int32)
        ctx = Contexts.fresh()
        enc = ArithEncoder()
        enc.encode_residual(levels, ctx, Contexts.CBF_LUMA, sig)
        dec = ArithDecoder(enc.finish())
        got = dec.decode_residual(n, Contexts.fresh(), Contexts.CBF_LUMA, sig)
        assert np.array_equal(got, levels)


def test_rate_counter_prices_against_frozen_states():
    ctx = Contexts.fresh()
    rc = RateCounter()
    for _ in range(100):
        rc.encode_bin(ctx, 0, 0)
    assert rc.bits == 100 * 32768  # state 16384 is exactly one bit, and it never moves
    assert ctx[0] == CONTEXT_INIT


def test_empty_stream_is_rejected():
    with pytest.raises(MalformedBitstreamError):
        ArithDecoder(b"")


def test_truncated_arithmetic_stream_reports_offset():
    ctx = Contexts.fresh()
    enc = ArithEncoder()
    for i in range(2000):
        enc.encode_bin(ctx, 0, (i * 7) % 3 == 0)
    data = enc.finish()
    dec = ArithDecoder(data[:20])
    with pytest.raises(MalformedBitstreamError) as info:
        for _ in range(2000):
            dec.decode_bin(Contexts.fresh(), 0)
    assert info.value.offset is not None
