"""BD-rate, the 6:1:1 YUV weighting and RD-curve CSV handling."""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from uvc.errors import InvalidArgumentError, MalformedInputError

COMPONENTS = ("y", "u", "v")


@dataclass(frozen=True)
class RdCurve:
    """(bitrate kbps, PSNR dB) points, strictly ascending in bitrate."""

    rates: tuple
    psnrs: tuple

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        psnrs = tuple(float(p) for p in self.psnrs)
        if len(rates) != len(psnrs):
            raise InvalidArgumentError("rates and PSNRs differ in length")
        if len(rates) < 4:
            raise InvalidArgumentError(f"an RD curve needs at least 4 points, got {len(rates)}")
        if any(r <= 0 or not math.isfinite(r) for r in rates):
            raise InvalidArgumentError("bitrates must be positive and finite")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise InvalidArgumentError("bitrates must be strictly ascending")
        if any(b < a for a, b in zip(psnrs, psnrs[1:])):
            warnings.warn("PSNR decreases with bitrate on this curve", stacklevel=2)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "psnrs", psnrs)

    @classmethod
    def from_points(cls, points) -> RdCurve:
        pts = sorted((float(r), float(p)) for r, p in points)
        return cls(tuple(r for r, _ in pts), tuple(p for _, p in pts))


def weighted_yuv(y: float, u: float, v: float) -> float:
    return (6.0 * y + u + v) / 8.0


def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fritsch-Carlson monotone slopes with the usual three-point end conditions."""
    h = np.diff(x)
    delta = np.diff(y) / h
    n = len(x)
    d = np.zeros(n)
    for k in range(1, n - 1):
        if delta[k - 1] * delta[k] > 0:
            w1 = 2 * h[k] + h[k - 1]
            w2 = h[k] + 2 * h[k - 1]
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k])
    d[0] = _end_slope(h[0], h[1], delta[0], delta[1])
    d[-1] = _end_slope(h[-1], h[-2], delta[-1], delta[-2])
    return d


def _end_slope(h0, h1, m0, m1) -> float:
    d = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
    if np.sign(d) != np.sign(m0):
        return 0.0
    if np.sign(m0) != np.sign(m1) and abs(d) > abs(3 * m0):
        return 3 * m0
    return d


def _cubic_integral(x, y, d, lo: float, hi: float) -> float:
    """Exact integral over [lo, hi] of the Hermite interpolant through (x, y, d)."""
    total = 0.0
    for k in range(len(x) - 1):
        a, b = max(lo, x[k]), min(hi, x[k + 1])
        if b <= a:
            continue
        h = x[k + 1] - x[k]
        delta = (y[k + 1] - y[k]) / h
        c0, c1 = y[k], d[k]
        c2 = (3 * delta - 2 * d[k] - d[k + 1]) / h
        c3 = (d[k] + d[k + 1] - 2 * delta) / (h * h)

        def prim(t):
            return t * (c0 + t * (c1 / 2 + t * (c2 / 3 + t * c3 / 4)))

        total += prim(b - x[k]) - prim(a - x[k])
    return total


def _prepare(curve) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(curve, RdCurve):
        curve = RdCurve.from_points(curve)
    order = np.argsort(curve.psnrs, kind="stable")
    p = np.asarray(curve.psnrs)[order]
    r = np.log10(np.asarray(curve.rates)[order])
    if np.any(np.diff(p) <= 0):
        raise InvalidArgumentError("BD-rate needs distinct PSNR values on each curve")
    return p, r


def _overlap(pa, pt) -> tuple[float, float]:
    lo, hi = max(pa[0], pt[0]), min(pa[-1], pt[-1])
    if hi <= lo:
        raise InvalidArgumentError("the two curves share no PSNR range")
    return lo, hi


def bd_rate(anchor, test) -> float:
    """Average bitrate difference (percent) at equal PSNR; negative means the test saves bits."""
    pa, ra = _prepare(anchor)
    pt, rt = _prepare(test)
    lo, hi = _overlap(pa, pt)
    ia = _cubic_integral(pa, ra, pchip_slopes(pa, ra), lo, hi)
    it = _cubic_integral(pt, rt, pchip_slopes(pt, rt), lo, hi)
    return (10.0 ** ((it - ia) / (hi - lo)) - 1.0) * 100.0


def bd_rate_polyfit(anchor, test) -> float:
    """Classic variant: global cubic fit of log-rate against PSNR."""
    pa, ra = _prepare(anchor)
    pt, rt = _prepare(test)
    lo, hi = _overlap(pa, pt)
    ca = np.polyint(np.polyfit(pa, ra, 3))
    ct = np.polyint(np.polyfit(pt, rt, 3))
    diff = (np.polyval(ct, hi) - np.polyval(ct, lo)) - (np.polyval(ca, hi) - np.polyval(ca, lo))
    return (10.0 ** (diff / (hi - lo)) - 1.0) * 100.0


@dataclass(frozen=True)
class BdReport:
    y: float
    u: float
    v: float

    @property
    def yuv(self) -> float:
        return weighted_yuv(self.y, self.u, self.v)


def bd_report(anchor: dict, test: dict, fn=bd_rate) -> BdReport:
    """BD-rate per component from {component: curve} dicts."""
    return BdReport(*(fn(anchor[c], test[c]) for c in COMPONENTS))


def read_rd_csv(path_or_text) -> dict[str, dict[str, RdCurve]]:
    """Rows of label, component, bitrate_kbps, psnr_db (header optional) -> curves."""
    if isinstance(path_or_text, (str, os.PathLike)) and os.path.exists(path_or_text):
        with open(path_or_text, newline="") as fh:
            text = fh.read()
    else:
        text = str(path_or_text)
    points: dict = {}
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or row[0].startswith("#"):
            continue
        if lineno == 1 and row[0].strip().lower() == "label":
            continue
        if len(row) != 4:
            raise MalformedInputError(f"line {lineno}: expected 4 fields, got {len(row)}")
        label, comp = row[0].strip(), row[1].strip().lower()
        if comp not in COMPONENTS:
            raise MalformedInputError(f"line {lineno}: unknown component {row[1]!r}")
        try:
            rate, psnr = float(row[2]), float(row[3])
        except ValueError:
            raise MalformedInputError(f"line {lineno}: bitrate and PSNR must be numbers") from None
        points.setdefault(label, {}).setdefault(comp, []).append((rate, psnr))
    return {label: {c: RdCurve.from_points(p) for c, p in comps.items()} for label, comps in points.items()}


def write_rd_csv(rows, path) -> None:
    """Write (label, component, kbps, psnr) rows."""
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "component", "bitrate_kbps", "psnr_db"])
        for row in rows:
            w.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}"])


def report_rows(curves: dict, anchor: str):
    """(label, BdReport with PCHIP, BdReport with polynomial fit) for every non-anchor label."""
    if anchor not in curves:
        raise InvalidArgumentError(f"anchor label {anchor!r} not found")
    out = []
    for label in curves:
        if label == anchor:
            continue
        out.append((label, bd_report(curves[anchor], curves[label]),
                    bd_report(curves[anchor], curves[label], bd_rate_polyfit)))
    return out


def format_report(rows, anchor: str) -> str:
    lines = [f"BD-rate vs {anchor} (%; negative = savings; weighted YUV = (6Y+U+V)/8)",
             f"{'label':<24}{'Y':>9}{'U':>9}{'V':>9}{'YUV':>9}{'YUV poly':>10}"]
    for label, rep, poly in rows:
        lines.append(f"{label:<24}{rep.y:9.3f}{rep.u:9.3f}{rep.v:9.3f}{rep.yuv:9.3f}{poly.yuv:10.3f}")
    return "\n".join(lines)


def write_report_csv(rows, path) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "bd_y", "bd_u", "bd_v", "bd_yuv", "bd_yuv_polyfit"])
        for label, rep, poly in rows:
            w.writerow([label] + [f"{x:.6f}" for x in (rep.y, rep.u, rep.v, rep.yuv, poly.yuv)])
