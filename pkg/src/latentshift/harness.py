"""RD evaluation across coding modes, BD-rate tables and complexity measurement."""

from __future__ import annotations

import csv
import gc
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import codec
from .latent_shift import image8
from .metrics import RDCurve, RDPoint, bd_rate, psnr

MODES = ("baseline", "shift", "finetune", "finetune+shift")


class ConfigurationError(ValueError):
    pass


@dataclass
class ImageRecord:
    image_id: str
    lambda_index: int
    lam: float
    mode: str
    bytes: int
    bpp: float
    psnr: float
    rho_f_idx: int
    rho_h_idx: int
    encode_seconds: float
    decode_seconds: float


def _code_image(
    name: str,
    x8: np.ndarray,
    model: codec.CodecModel,
    mode: str,
    finetuned: tuple[codec.LatentPair, float] | None = None,
) -> ImageRecord:
    """Code one image; ``finetuned`` carries fine-tuned latents and the time spent on them."""
    x = x8 / 255.0
    start = time.perf_counter()
    latents, extra_s = finetuned if mode.startswith("finetune") else (None, 0.0)
    result = codec.encode_with_details(x, model, shift_enabled=mode.endswith("shift"), latents=latents)
    data = result.stream_bytes
    encode_s = time.perf_counter() - start + extra_s
    start = time.perf_counter()
    decoded = codec.decode(data, model)
    decode_s = time.perf_counter() - start
    pixels = x.shape[0] * x.shape[1]
    return ImageRecord(
        name,
        model.lambda_index,
        model.lam,
        mode,
        len(data),
        8.0 * len(data) / pixels,
        psnr(x8, image8(decoded)),
        result.stream.rho_f_index,
        result.stream.rho_h_index,
        encode_s,
        decode_s,
    )


def check_models(models: Sequence[codec.CodecModel], expected: int | None = None) -> list[codec.CodecModel]:
    """Sort by lambda index and reject gaps or duplicates."""
    models = sorted(models, key=lambda m: m.lambda_index)
    indices = [m.lambda_index for m in models]
    if len(set(indices)) != len(indices):
        raise ConfigurationError(f"duplicate lambda indices {indices}")
    if expected is not None and indices != list(range(expected)):
        missing = sorted(set(range(expected)) - set(indices))
        raise ConfigurationError(f"missing checkpoints for lambda indices {missing}")
    return models


FinetuneCache = dict[tuple[int, str], tuple[codec.LatentPair, float]]


def finetune_all(
    models: Sequence[codec.CodecModel],
    images: Sequence[tuple[str, np.ndarray]],
    finetune_iters: int = 1000,
    seed: int = 0,
) -> FinetuneCache:
    """Fine-tuned latents and the seconds spent, keyed by ``(lambda_index, image_id)``."""
    out: FinetuneCache = {}
    for model in models:
        for name, x8 in images:
            start = time.perf_counter()
            latents = codec.finetune_latents(x8 / 255.0, model, finetune_iters, seed=seed).latents
            out[(model.lambda_index, name)] = (latents, time.perf_counter() - start)
    return out


def evaluate(
    models: Sequence[codec.CodecModel],
    images: Sequence[tuple[str, np.ndarray]],
    modes: Sequence[str] = ("baseline", "shift"),
    finetune_iters: int = 1000,
    seed: int = 0,
    finetuned: FinetuneCache | None = None,
) -> list[ImageRecord]:
    """Code every image with every model in every mode and decode it back.

    Images must be uint8 ``(H, W, 3)`` with sides divisible by the model's
    downsampling factor.  Both fine-tune modes share one optimisation run per
    image; pass ``finetuned`` (from :func:`finetune_all`) to reuse existing runs.
    """
    for mode in modes:
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; choose from {MODES}")
    models = check_models(models)
    if finetuned is None and any(m.startswith("finetune") for m in modes):
        finetuned = finetune_all(models, images, finetune_iters, seed)
    records = []
    for model in models:
        for name, x8 in images:
            cached = finetuned.get((model.lambda_index, name)) if finetuned else None
            for mode in modes:
                records.append(_code_image(name, x8, model, mode, cached))
    return records


def rd_curves(records: Sequence[ImageRecord]) -> dict[str, RDCurve]:
    """One curve per mode, averaging bpp and PSNR over images at each lambda."""
    grouped: dict[str, dict[int, list[ImageRecord]]] = {}
    for r in records:
        grouped.setdefault(r.mode, {}).setdefault(r.lambda_index, []).append(r)
    curves = {}
    for mode, by_lambda in grouped.items():
        points = [
            RDPoint(float(np.mean([r.bpp for r in rs])), float(np.mean([r.psnr for r in rs])))
            for _, rs in sorted(by_lambda.items())
        ]
        curves[mode] = RDCurve(points, label=mode)
    return curves


def bd_table(curves: dict[str, RDCurve], reference: str = "baseline") -> dict[str, float]:
    if reference not in curves:
        raise ConfigurationError(f"no {reference!r} curve to compare against")
    return {mode: bd_rate(curves[reference], curve) for mode, curve in curves.items()}


def write_records(path: str | Path, records: Sequence[ImageRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in fields(ImageRecord)])
        for r in records:
            row = asdict(r)
            row["encode_seconds"] = f"{r.encode_seconds:.6f}"
            row["decode_seconds"] = f"{r.decode_seconds:.6f}"
            writer.writerow(row.values())


def write_bd_table(path: str | Path, table: dict[str, float], reference: str = "baseline") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "reference", "bd_rate_percent"])
        for mode, value in table.items():
            writer.writerow([mode, reference, f"{value:.4f}"])


def summary(table: dict[str, float]) -> str:
    width = max(len(m) for m in table)
    return "\n".join(f"{mode:<{width}}  {value:+8.3f} %" for mode, value in table.items())


# -- complexity ---------------------------------------------------------------


@dataclass
class ComplexityRecord:
    images: int
    encode_baseline_s: float
    encode_shift_s: float
    encode_finetune_s: float
    decode_baseline_s: float
    decode_shift_s: float
    baseline_counts: dict
    shift_counts: dict
    finetune_iters: int
    decode_ratios: list = field(default_factory=list)

    @property
    def decode_overhead_percent(self) -> float:
        """Median of back-to-back shift/baseline decode ratios, in percent.

        Pairing cancels slow drift in machine speed, which on a shared core is
        as large as the effect being measured.  Falls back to the summed best
        times when no pairs were recorded.
        """
        if self.decode_ratios:
            return 100.0 * (float(np.median(self.decode_ratios)) - 1.0)
        return 100.0 * (self.decode_shift_s / self.decode_baseline_s - 1.0)

    @property
    def shift_encode_ratio(self) -> float:
        return self.encode_shift_s / self.encode_baseline_s

    @property
    def finetune_encode_ratio(self) -> float:
        return self.encode_finetune_s / self.encode_baseline_s

    @property
    def extra_passes(self) -> dict:
        return {k: self.shift_counts[k] - self.baseline_counts[k] for k in self.baseline_counts}

    def rows(self) -> list[tuple[str, str]]:
        out = [
            ("images", str(self.images)),
            ("finetune_iters", str(self.finetune_iters)),
            ("encode_baseline_s", f"{self.encode_baseline_s:.6f}"),
            ("encode_shift_s", f"{self.encode_shift_s:.6f}"),
            ("encode_finetune_s", f"{self.encode_finetune_s:.6f}"),
            ("decode_baseline_s", f"{self.decode_baseline_s:.6f}"),
            ("decode_shift_s", f"{self.decode_shift_s:.6f}"),
            ("decode_pairs", str(len(self.decode_ratios))),
            ("decode_overhead_percent", f"{self.decode_overhead_percent:.3f}"),
            ("shift_encode_ratio", f"{self.shift_encode_ratio:.3f}"),
            ("finetune_encode_ratio", f"{self.finetune_encode_ratio:.1f}"),
        ]
        out += [(f"extra_{k}_passes", str(v)) for k, v in self.extra_passes.items()]
        return out


def _counts(model: codec.CodecModel) -> dict:
    c = model.counter
    return {
        "analysis": c.analysis,
        "hyper_analysis": c.hyper_analysis,
        "hyper_synthesis": c.hyper_synthesis,
        "synthesis": c.synthesis,
        "gradient": c.gradient,
    }


def _best_of(fn, repeats: int) -> float:
    """Best wall time of ``repeats`` calls, with the cyclic GC paused as ``timeit`` does."""
    best = float("inf")
    for _ in range(repeats):
        gc.collect()
        gc.disable()
        try:
            start = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - start)
        finally:
            gc.enable()
    return best


def measure_complexity(
    model: codec.CodecModel,
    images: Sequence[np.ndarray],
    finetune_iters: int = 1000,
    repeats: int = 3,
    seed: int = 0,
) -> ComplexityRecord:
    """Single-threaded wall times (best of ``repeats``) and pass counts.

    Times are summed over the image set.  Decoder overhead comes from
    ``repeats`` back-to-back decode pairs per image.  Pass counts are per encode and must
    be the same for every image.  Fine-tuning is timed once per image since it
    dominates everything else.
    """
    xs = [np.asarray(x, np.float64) / 255.0 if x.dtype == np.uint8 else x for x in images]
    with threadpool_limits(limits=1):
        times = {"base": 0.0, "shift": 0.0, "ft": 0.0, "dec_base": 0.0, "dec_shift": 0.0}
        base_counts = shift_counts = None
        ratios: list[float] = []
        for x in xs:
            model.counter.reset()
            base = codec.encode_with_details(x, model, shift_enabled=False)
            bc = _counts(model)
            model.counter.reset()
            shifted = codec.encode_with_details(x, model, shift_enabled=True)
            sc = _counts(model)
            if base_counts is not None and (bc != base_counts or sc != shift_counts):
                raise RuntimeError("pass counts differ between images")
            base_counts, shift_counts = bc, sc

            times["base"] += _best_of(lambda: codec.encode_with_details(x, model, False), repeats)
            times["shift"] += _best_of(lambda: codec.encode_with_details(x, model, True), repeats)
            base_bytes, shift_bytes = base.stream_bytes, shifted.stream_bytes
            dec_base, dec_shift = float("inf"), float("inf")
            for i in range(repeats):
                # Alternate which decoder goes first so neither always runs on a warmer cache.
                if i % 2:
                    t_shift = _best_of(lambda: codec.decode(shift_bytes, model), 1)
                    t_base = _best_of(lambda: codec.decode(base_bytes, model), 1)
                else:
                    t_base = _best_of(lambda: codec.decode(base_bytes, model), 1)
                    t_shift = _best_of(lambda: codec.decode(shift_bytes, model), 1)
                ratios.append(t_shift / t_base)
                dec_base, dec_shift = min(dec_base, t_base), min(dec_shift, t_shift)
            times["dec_base"] += dec_base
            times["dec_shift"] += dec_shift

            start = time.perf_counter()
            ft = codec.finetune_latents(x, model, finetune_iters, seed=seed)
            codec.encode_with_details(x, model, False, latents=ft.latents)
            times["ft"] += time.perf_counter() - start
    return ComplexityRecord(
        len(xs),
        times["base"],
        times["shift"],
        times["ft"],
        times["dec_base"],
        times["dec_shift"],
        base_counts or {},
        shift_counts or {},
        finetune_iters,
        ratios,
    )


def write_complexity(path: str | Path, record: ComplexityRecord) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(record.rows())
