"""Decoder-side latent shifting along entropy gradients.

The decoder can differentiate the bit cost of any latent it has decoded.
Stepping the side latent along its own bit gradient changes the conditional
model of the main latent; stepping the main latent along its bit gradient
changes the reconstruction.  The encoder tries every entry of
:data:`STEP_TABLE` for each stage, keeps the best, and signals both indices
in the stream header.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .entropy_models import GaussianConditional

if TYPE_CHECKING:
    from .codec import CodecModel

# Format constant tied to bitstream version 2.  Steps multiply the raw bit
# gradient.  Both signs are offered because which way helps varies by image.
STEP_TABLE: tuple[float, ...] = (0.0, -(2.0**-8), -(2.0**-6), -(2.0**-4), 2.0**-8, 2.0**-6, 2.0**-4, 2.0**-2)

assert len(STEP_TABLE) == 8 and STEP_TABLE[0] == 0.0


def argmin_step(values: Sequence[float], table: Sequence[float] = STEP_TABLE) -> int:
    """Index of the smallest value; ties go to smaller ``|rho|`` then smaller index."""
    best = 0
    for i, v in enumerate(values):
        b = values[best]
        if v < b or (v == b and abs(table[i]) < abs(table[best])):
            best = i
    return best


@dataclass
class ShiftDecision:
    rho_f_index: int = 0
    rho_h_index: int = 0
    main_bits: list[float] = field(default_factory=list)
    distortions: list[float] = field(default_factory=list)

    @property
    def main_bits_delta(self) -> float:
        if not self.main_bits:
            return 0.0
        return self.main_bits[self.rho_f_index] - self.main_bits[0]

    @property
    def distortion_delta(self) -> float:
        if not self.distortions:
            return 0.0
        return self.distortions[self.rho_h_index] - self.distortions[0]


def image8(x_hat: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and quantise to 8-bit, the form the decoder delivers."""
    return np.rint(np.clip(x_hat, 0.0, 1.0) * 255.0).astype(np.uint8)


def delivered_mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    """MSE on the [0, 1] scale between ``x`` and the 8-bit decoded image."""
    diff = image8(x_hat).astype(np.float64) / 255.0 - x
    return float(np.mean(diff * diff))


# -- the two shifts, shared by encoder and decoder ----------------------------


def shift_side(z_hat: np.ndarray, model: "CodecModel", index: int) -> np.ndarray:
    """Apply the signalled side-latent step; index 0 is the identity."""
    if index == 0:
        return z_hat
    return z_hat + STEP_TABLE[index] * model.side_entropy_grad(z_hat)


def shift_main(y_hat: np.ndarray, cond: GaussianConditional, model: "CodecModel", index: int) -> np.ndarray:
    if index == 0:
        return y_hat
    return y_hat + STEP_TABLE[index] * model.main_entropy_grad(y_hat, cond)


# -- encoder-side selection ---------------------------------------------------


def select_rho_f(
    y_hat: np.ndarray, z_hat: np.ndarray, model: "CodecModel"
) -> tuple[int, np.ndarray, GaussianConditional, list[float]]:
    """Pick the side-latent step that minimises the main-code bits.

    Returns ``(index, shifted z, conditional model, bits per candidate)``.
    """
    grad = model.side_entropy_grad(z_hat)
    bits, conds, shifted = [], [], []
    for rho in STEP_TABLE:
        z = z_hat + rho * grad
        cond = model.hyper_synthesis(z)
        bits.append(cond.bits(y_hat))
        conds.append(cond)
        shifted.append(z)
    index = argmin_step(bits)
    if index == 0:
        shifted[0] = z_hat
    return index, shifted[index], conds[index], bits


def select_rho_h(
    x: np.ndarray, y_hat: np.ndarray, cond: GaussianConditional, model: "CodecModel"
) -> tuple[int, np.ndarray, list[float]]:
    """Pick the main-latent step that minimises delivered distortion.

    Needs the source image, so this only runs in the encoder.  Exactly one
    gradient evaluation and eight synthesis passes.
    """
    grad = model.main_entropy_grad(y_hat, cond)
    dists, shifted = [], []
    for rho in STEP_TABLE:
        y = y_hat + rho * grad
        dists.append(delivered_mse(x, model.synthesis(y)))
        shifted.append(y)
    index = argmin_step(dists)
    return index, (y_hat if index == 0 else shifted[index]), dists


def apply_shift_decoder_side(stream, model: "CodecModel") -> np.ndarray:
    """Decode a stream, applying its signalled shifts.  Uses only ``(stream, model)``."""
    from .codec import decode

    return decode(stream, model)


# -- reporting ----------------------------------------------------------------

GAIN_COLUMNS = [
    "image_id",
    "lambda",
    "bpp_base",
    "bpp_shift",
    "psnr_base",
    "psnr_shift",
    "rho_f_idx",
    "rho_h_idx",
    "corr_side",
    "corr_main",
]


@dataclass
class GainRow:
    image_id: str
    lam: float
    bpp_base: float
    bpp_shift: float
    psnr_base: float
    psnr_shift: float
    rho_f_idx: int
    rho_h_idx: int
    corr_side: float
    corr_main: float
    main_bits_base: float = 0.0
    main_bits_shift: float = 0.0
    mse_base: float = 0.0
    mse_shift: float = 0.0

    @property
    def gain_db(self) -> float:
        return self.psnr_shift - self.psnr_base

    def as_csv(self) -> list:
        return [
            self.image_id,
            f"{self.lam:g}",
            f"{self.bpp_base:.6f}",
            f"{self.bpp_shift:.6f}",
            f"{self.psnr_base:.6f}",
            f"{self.psnr_shift:.6f}",
            self.rho_f_idx,
            self.rho_h_idx,
            f"{self.corr_side:.6f}",
            f"{self.corr_main:.6f}",
        ]


def shift_gain_report(
    images: Iterable[tuple[str, np.ndarray]], models: Sequence["CodecModel"]
) -> list[GainRow]:
    """Encode every image with and without shifting under every model."""
    from . import analysis, codec
    from .metrics import psnr

    rows = []
    images = list(images)
    for model in models:
        for image_id, x in images:
            base = codec.encode_with_details(x, model, shift_enabled=False)
            shift = codec.encode_with_details(x, model, shift_enabled=True)
            pixels = x.shape[0] * x.shape[1]
            corr = analysis.gradient_correlations(x, model, base.latents)
            x8 = image8(x)
            rows.append(
                GainRow(
                    image_id=image_id,
                    lam=model.lam,
                    bpp_base=8 * len(base.stream_bytes) / pixels,
                    bpp_shift=8 * len(shift.stream_bytes) / pixels,
                    psnr_base=psnr(x8, image8(codec.reconstruct(base, model))),
                    psnr_shift=psnr(x8, image8(codec.reconstruct(shift, model))),
                    rho_f_idx=shift.decision.rho_f_index,
                    rho_h_idx=shift.decision.rho_h_index,
                    corr_side=corr.corr_side,
                    corr_main=corr.corr_main,
                    main_bits_base=shift.decision.main_bits[0],
                    main_bits_shift=shift.decision.main_bits[shift.decision.rho_f_index],
                    mse_base=shift.decision.distortions[0],
                    mse_shift=shift.decision.distortions[shift.decision.rho_h_index],
                )
            )
    return rows


def write_gain_csv(rows: Iterable[GainRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GAIN_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())
