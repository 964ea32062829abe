import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvc.errors import InvalidArgumentError, MalformedInputError
from uvc.metrics import (
    RdCurve,
    bd_rate,
    bd_rate_polyfit,
    format_report,
    read_rd_csv,
    report_rows,
    weighted_yuv,
    write_rd_csv,
)

ANCHOR = RdCurve((1000, 1800, 3200, 6000), (32.0, 34.5, 37.0, 39.6))


def _scaled(curve, k):
    return RdCurve(tuple(r * k for r in curve.rates), curve.psnrs)


def _random_curve(rng):
    rates = np.cumsum(rng.uniform(200, 3000, 5)) + 100
    psnrs = 30 + np.cumsum(rng.uniform(0.5, 3.0, 5))
    return RdCurve(tuple(rates), tuple(psnrs))


def test_identity_is_zero():
    assert bd_rate(ANCHOR, ANCHOR) == 0.0


def test_uniform_ten_percent_saving():
    assert bd_rate(ANCHOR, _scaled(ANCHOR, 0.9)) == pytest.approx(-10.0, abs=1e-9)
    assert bd_rate_polyfit(ANCHOR, _scaled(ANCHOR, 0.9)) == pytest.approx(-10.0, abs=1e-9)


def test_weighted_yuv():
    assert weighted_yuv(-6.71, -14.36, -14.87) == pytest.approx(-8.69, abs=0.005)
    assert weighted_yuv(-0.17, -0.67, -0.30) == pytest.approx(-0.25, abs=0.005)
    assert weighted_yuv(3.5, 3.5, 3.5) == pytest.approx(3.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_antisymmetry(seed):
    rng = np.random.default_rng(seed)
    a = _random_curve(rng)
    # per-point rate jitter keeps the two curves from being a pure offset
    rates = np.array(a.rates) * rng.uniform(0.8, 1.2) * np.cumprod(rng.uniform(1.0, 1.05, 5))
    b = RdCurve(tuple(rates), tuple(np.array(a.psnrs) + rng.uniform(-0.3, 0.3)))
    ab, ba = bd_rate(a, b), bd_rate(b, a)
    assert ab == pytest.approx(-ba / (1 + ba / 100), abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    a, b = _random_curve(rng), _random_curve(rng)
    try:
        want = bd_rate(a, b)
    except InvalidArgumentError:
        return  # no PSNR overlap
    assert bd_rate(_scaled(a, c), _scaled(b, c)) == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_monotone_response():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = _random_curve(rng)
        values = [bd_rate(a, _scaled(a, k)) for k in (1.2, 1.0, 0.95, 0.7, 0.5)]
        assert all(x > y for x, y in zip(values, values[1:]))


def test_errors():
    with pytest.raises(InvalidArgumentError):
        RdCurve((1, 2, 3), (30, 31, 32))
    with pytest.raises(InvalidArgumentError):
        RdCurve((1, 3, 2, 4), (30, 31, 32, 33))
    with pytest.raises(InvalidArgumentError):
        RdCurve((0, 1, 2, 3), (30, 31, 32, 33))
    far = RdCurve((1, 2, 3, 4), (50, 51, 52, 53))
    with pytest.raises(InvalidArgumentError):
        bd_rate(ANCHOR, far)
    flat = RdCurve((1, 2, 3, 4), (33, 33, 34, 35))
    with pytest.raises(InvalidArgumentError):
        bd_rate(ANCHOR, flat)


def test_non_monotone_psnr_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        RdCurve((1, 2, 3, 4), (30, 32, 31, 33))
    assert caught


def test_both_variants_agree_on_pure_offsets():
    rng = np.random.default_rng(4)
    for _ in range(30):
        a = _random_curve(rng)
        k = rng.uniform(0.85, 1.15)
        assert bd_rate(a, _scaled(a, k)) == pytest.approx((k - 1) * 100, abs=1e-9)
        assert bd_rate_polyfit(a, _scaled(a, k)) == pytest.approx((k - 1) * 100, abs=1e-9)


def test_csv_round_trip(tmp_path):
    rows = []
    for label, k in (("anchor", 1.0), ("uqt", 0.97)):
        for comp in ("y", "u", "v"):
            for r, p in zip(ANCHOR.rates, ANCHOR.psnrs):
                rows.append((label, comp, r * k, p))
    path = tmp_path / "rd.csv"
    write_rd_csv(rows, path)
    curves = read_rd_csv(path)
    assert set(curves) == {"anchor", "uqt"} and set(curves["uqt"]) == {"y", "u", "v"}
    (label, rep, poly), = report_rows(curves, "anchor")
    assert label == "uqt"
    assert rep.y == pytest.approx(-3.0, abs=1e-4)
    assert rep.yuv == pytest.approx(weighted_yuv(rep.y, rep.u, rep.v))
    text = format_report(report_rows(curves, "anchor"), "anchor")
    assert "uqt" in text and "-3.000" in text
    with pytest.raises(InvalidArgumentError):
        report_rows(curves, "missing")


@pytest.mark.parametrize("text", ["a,y,1\n", "a,w,1,2\n", "a,y,x,2\n"])
def test_csv_errors(text):
    with pytest.raises(MalformedInputError):
        read_rd_csv(text)
