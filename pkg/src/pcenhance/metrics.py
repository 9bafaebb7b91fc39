"""Fidelity and rate-distortion metrics: PSNR, YCbCr-PSNR, delta-PSNR, Bjontegaard deltas."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

PSNR_CAP = 99.99
YCBCR_WEIGHTS = (6.0 / 8.0, 1.0 / 8.0, 1.0 / 8.0)


class NoOverlapError(ValueError):
    """The two RD curves share no rate (or PSNR) interval."""


def psnr(a, b, peak: float = 255.0) -> float:
    """10 log10(peak^2 / MSE); ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def cap_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


def ycbcr_psnr(psnr_y: float, psnr_cb: float, psnr_cr: float) -> float:
    """(6 Y + Cb + Cr) / 8, with infinite inputs capped first."""
    wy, wcb, wcr = YCBCR_WEIGHTS
    return wy * cap_psnr(psnr_y) + wcb * cap_psnr(psnr_cb) + wcr * cap_psnr(psnr_cr)


def delta_psnr(anchor_psnr: float, test_psnr: float) -> float:
    return test_psnr - anchor_psnr


@dataclass(frozen=True)
class RDCurve:
    """Rate-distortion samples with strictly increasing bitrate (bpip)."""

    bitrate: tuple
    psnr: tuple

    def __init__(self, points):
        pts = [(float(r), cap_psnr(float(q))) for r, q in points]
        if len(pts) < 4:
            raise ValueError(f"an RD curve needs at least 4 points, got {len(pts)}")
        rates = np.array([p[0] for p in pts])
        quals = np.array([p[1] for p in pts])
        if not (np.all(np.isfinite(rates)) and np.all(np.isfinite(quals))):
            raise ValueError("RD points must be finite")
        if np.any(rates <= 0):
            raise ValueError("bitrates must be positive")
        if np.any(np.diff(rates) <= 0):
            raise ValueError("bitrates must be strictly increasing")
        object.__setattr__(self, "bitrate", tuple(rates.tolist()))
        object.__setattr__(self, "psnr", tuple(quals.tolist()))

    @classmethod
    def from_arrays(cls, bitrate, psnr):
        return cls(zip(bitrate, psnr))

    @property
    def points(self):
        return list(zip(self.bitrate, self.psnr))

    def __len__(self):
        return len(self.bitrate)


@dataclass(frozen=True)
class BDResult:
    bd_rate_percent: float
    bd_psnr_db: float
    overlap_log_rate: tuple
    overlap_psnr: tuple


def _average_gap(x_a, y_a, x_b, y_b, what: str):
    """Mean of fit_b - fit_a over the common x range, both fits cubic in x."""
    lo = max(min(x_a), min(x_b))
    hi = min(max(x_a), max(x_b))
    if not hi > lo:
        raise NoOverlapError(f"no overlap between the curves in {what}")
    fa = Polynomial.fit(x_a, y_a, 3).integ()
    fb = Polynomial.fit(x_b, y_b, 3).integ()
    gap = (fb(hi) - fb(lo)) - (fa(hi) - fa(lo))
    return gap / (hi - lo), (lo, hi)


def bd_metrics(anchor: RDCurve, test: RDCurve) -> BDResult:
    """Bjontegaard BD-rate (percent) and BD-PSNR (dB) of ``test`` against ``anchor``.

    Cubic least-squares fits of PSNR over log-rate and log-rate over PSNR are
    integrated exactly on the overlapping interval.
    """
    for name, c in (("anchor", anchor), ("test", test)):
        if np.any(np.diff(c.psnr) <= 0):
            warnings.warn(f"{name} RD curve is not monotonic in PSNR; fitting anyway", RuntimeWarning)
    lr_a, lr_t = np.log(anchor.bitrate), np.log(test.bitrate)
    q_a, q_t = np.asarray(anchor.psnr), np.asarray(test.psnr)

    bd_psnr, rate_range = _average_gap(lr_a, q_a, lr_t, q_t, "log bitrate")
    avg_log_diff, psnr_range = _average_gap(q_a, lr_a, q_t, lr_t, "PSNR")
    return BDResult(
        bd_rate_percent=float((math.exp(avg_log_diff) - 1.0) * 100.0),
        bd_psnr_db=float(bd_psnr),
        overlap_log_rate=rate_range,
        overlap_psnr=psnr_range,
    )


def bd_quality(anchor_rate, anchor_quality, test_rate, test_quality) -> float:
    """Average quality gain at equal rate for any quality score (e.g. external perceptual scores)."""
    gap, _ = _average_gap(np.log(anchor_rate), np.asarray(anchor_quality, float),
                          np.log(test_rate), np.asarray(test_quality, float), "log bitrate")
    return float(gap)
