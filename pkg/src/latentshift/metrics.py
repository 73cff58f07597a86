"""PSNR and Bjontegaard delta-rate."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

PSNR_MAX = 100.0  # reported for bit-identical images


class MetricError(ValueError):
    pass


def psnr(x: np.ndarray, x_hat: np.ndarray, peak: float = 255.0) -> float:
    """RGB PSNR in dB over all samples; identical images give :data:`PSNR_MAX`."""
    x = np.asarray(x, np.float64)
    x_hat = np.asarray(x_hat, np.float64)
    if x.shape != x_hat.shape:
        raise MetricError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    mse = np.mean((x - x_hat) ** 2)
    if mse == 0:
        return PSNR_MAX
    return float(10.0 * np.log10(peak * peak / mse))


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise MetricError(f"bpp must be positive, got {self.bpp}")


class RDCurve:
    """At least four RD points sorted by strictly increasing rate."""

    def __init__(self, points: Iterable[RDPoint], label: str = ""):
        pts = sorted(points, key=lambda p: p.bpp)
        if len(pts) < 4:
            raise MetricError(f"BD-rate needs >= 4 points, got {len(pts)}")
        rates = [p.bpp for p in pts]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise MetricError("RD curve rates must be strictly increasing")
        q = [p.psnr for p in pts]
        if any(b < a for a, b in zip(q, q[1:])):
            log.warning("RD curve %r is not monotone in PSNR", label)
        self.points = pts
        self.label = label

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])


def bd_rate(reference: RDCurve, test: RDCurve) -> float:
    """Average rate difference (percent) of ``test`` over ``reference`` at equal PSNR.

    Log-rate is fitted as a cubic in PSNR for each curve and the two fits are
    integrated over the shared PSNR interval.  Negative means savings.
    """
    lo = max(reference.psnrs.min(), test.psnrs.min())
    hi = min(reference.psnrs.max(), test.psnrs.max())
    if not hi > lo:
        raise MetricError("RD curves do not overlap in PSNR")
    p_ref = np.polyfit(reference.psnrs, np.log(reference.rates), 3)
    p_test = np.polyfit(test.psnrs, np.log(test.rates), 3)
    i_ref, i_test = np.polyint(p_ref), np.polyint(p_test)
    area_ref = np.polyval(i_ref, hi) - np.polyval(i_ref, lo)
    area_test = np.polyval(i_test, hi) - np.polyval(i_test, lo)
    avg_diff = (area_test - area_ref) / (hi - lo)
    return float((np.exp(avg_diff) - 1.0) * 100.0)
