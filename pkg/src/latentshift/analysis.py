"""Stationarity residuals and gradient-correlation statistics.

For a model trained to optimality, the gradient of the side bits and the
gradient of the main bits with respect to the side codes cancel on average
over the training data, and so do the main-bit gradient and the weighted
distortion gradient with respect to the main codes.  The functions here
measure how far a model is from that, and how strongly the pairs correlate
image by image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import entropy_models as em
from . import tensor_core as tc
from .codec import CodecModel, LatentPair, baseline_latents

HIST_BINS = np.linspace(-1.0, 1.0, 41)


class UndefinedCorrelationError(ValueError):
    """Pearson correlation with a zero-variance operand."""


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    if a.shape != b.shape:
        raise tc.DimensionError(f"pearson operands differ in size: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("pearson needs at least two elements")
    da = a - a.mean()
    db = b - b.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    if na == 0 or nb == 0:
        raise UndefinedCorrelationError("zero variance")
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


@dataclass
class GradientPairs:
    """The four gradients entering the two stationarity conditions for one image."""

    side_wrt_z: np.ndarray
    main_wrt_z: np.ndarray
    main_wrt_y: np.ndarray
    distortion_wrt_y: np.ndarray  # already multiplied by the RD weight


def gradient_pairs(x: np.ndarray, model: CodecModel, latents: LatentPair | None = None) -> GradientPairs:
    if latents is None:
        latents = baseline_latents(x, model)
    y_hat, z_hat = latents.y_hat, latents.z_hat
    side_z = model.prior.grad_bits(z_hat)
    main_z = em.grad_main_bits_wrt_side(y_hat, z_hat, list(model.h_s))
    cond = em.conditional_model(z_hat, list(model.h_s))
    main_y = cond.grad_bits(y_hat)
    x_hat, gs_in = tc.sequential_forward(y_hat, list(model.g_s))
    weight = model.distortion_weight(x.shape[0] * x.shape[1])
    g_xhat = (x_hat - x) * (2.0 * weight / x.size)
    dist_y, _ = tc.sequential_backward(gs_in, list(model.g_s), g_xhat, need_params=False)
    return GradientPairs(side_z, main_z, main_y, dist_y)


@dataclass
class CorrelationRecord:
    image_id: str
    lam: float
    corr_side: float
    corr_main: float
    gain_db: float = float("nan")
    flagged: bool = False


def gradient_correlations(
    x: np.ndarray, model: CodecModel, latents: LatentPair | None = None, image_id: str = ""
) -> CorrelationRecord:
    g = gradient_pairs(x, model, latents)
    flagged = False
    try:
        corr_side = pearson(g.side_wrt_z, g.main_wrt_z)
    except UndefinedCorrelationError:
        corr_side, flagged = float("nan"), True
    try:
        corr_main = pearson(g.main_wrt_y, g.distortion_wrt_y)
    except UndefinedCorrelationError:
        corr_main, flagged = float("nan"), True
    return CorrelationRecord(image_id, model.lam, corr_side, corr_main, flagged=flagged)


# -- stationarity residuals ----------------------------------------------------


@dataclass
class KKTReport:
    residual_z: float
    residual_y: float
    samples: int
    records: list[CorrelationRecord] = field(default_factory=list)


def _normalised_residual(first: list[np.ndarray], second: list[np.ndarray]) -> float:
    a = np.stack(first)
    b = np.stack(second)
    num = np.linalg.norm((a + b).mean(axis=0))
    den = np.linalg.norm((np.abs(a) + np.abs(b)).mean(axis=0))
    return float(num / den) if den > 0 else 0.0


def kkt_residuals(
    model: CodecModel, images: Sequence[np.ndarray], latents: Sequence[LatentPair] | None = None
) -> KKTReport:
    """Normalised norms of the two averaged gradient sums (0 means stationary).

    All images must share one size so gradients can be averaged position-wise.
    ``latents`` overrides the baseline latents per image.
    """
    if len(images) == 0:
        raise ValueError("kkt_residuals needs at least one image")
    side_z, main_z, main_y, dist_y, records = [], [], [], [], []
    for i, x in enumerate(images):
        pair = latents[i] if latents is not None else None
        g = gradient_pairs(x, model, pair)
        side_z.append(g.side_wrt_z)
        main_z.append(g.main_wrt_z)
        main_y.append(g.main_wrt_y)
        dist_y.append(g.distortion_wrt_y)
        records.append(gradient_correlations(x, model, pair, image_id=str(i)))
    return KKTReport(
        residual_z=_normalised_residual(side_z, main_z),
        residual_y=_normalised_residual(main_y, dist_y),
        samples=len(images),
        records=records,
    )


# -- survey ----------------------------------------------------------------------


@dataclass
class Survey:
    records: list[CorrelationRecord]
    histogram: np.ndarray
    bin_edges: np.ndarray
    gain_correlation: float

    @property
    def valid(self) -> list[CorrelationRecord]:
        return [r for r in self.records if not r.flagged]

    @property
    def mean_corr_main(self) -> float:
        v = self.valid
        return float(np.mean([r.corr_main for r in v])) if v else float("nan")

    @property
    def mean_corr_side(self) -> float:
        v = self.valid
        return float(np.mean([r.corr_side for r in v])) if v else float("nan")


def correlation_survey(
    models: Sequence[CodecModel],
    images: Iterable[tuple[str, np.ndarray]],
    with_gains: bool = True,
) -> Survey:
    """One record per (image, model); histogram of corr_main; gain-vs-correlation."""
    from . import codec
    from .latent_shift import image8
    from .metrics import psnr

    images = list(images)
    records = []
    for model in models:
        for image_id, x in images:
            base = codec.encode_with_details(x, model, shift_enabled=with_gains)
            rec = gradient_correlations(x, model, base.latents, image_id)
            if with_gains:
                x8 = image8(x)
                psnr_base = psnr(x8, image8(model.synthesis(base.latents.y_hat)))
                psnr_shift = psnr(x8, image8(codec.reconstruct(base, model)))
                rec.gain_db = psnr_shift - psnr_base
            records.append(rec)
    valid = [r for r in records if not r.flagged]
    hist, edges = np.histogram([r.corr_main for r in valid], bins=HIST_BINS)
    gain_corr = float("nan")
    if with_gains and len(valid) >= 2:
        try:
            gain_corr = pearson([r.gain_db for r in valid], [r.corr_main for r in valid])
        except UndefinedCorrelationError:
            pass
    return Survey(records, hist, edges, gain_corr)


def write_survey(survey: Survey, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corr_records.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "lambda", "corr_side", "corr_main", "gain_db", "flagged"])
        for r in survey.records:
            w.writerow([r.image_id, f"{r.lam:g}", f"{r.corr_side:.6f}", f"{r.corr_main:.6f}", f"{r.gain_db:.6f}", int(r.flagged)])
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(survey.bin_edges[:-1], survey.bin_edges[1:], survey.histogram):
            w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(c)])
    with open(out / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "lambda", "corr_main", "gain_db"])
        for r in survey.valid:
            w.writerow([r.image_id, f"{r.lam:g}", f"{r.corr_main:.6f}", f"{r.gain_db:.6f}"])


def write_kkt(reports: Sequence[tuple[str, KKTReport]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "residual_z", "residual_y", "samples"])
        for label, r in reports:
            w.writerow([label, f"{r.residual_z:.6f}", f"{r.residual_y:.6f}", r.samples])
