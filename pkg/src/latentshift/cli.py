"""Command-line entry point: ``latentshift {train,encode,decode,eval,analyze,complexity}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, codec, harness, images
from .bitstream import Bitstream, FormatError
from .config import ConfigError, RunConfig, load_config
from .latent_shift import image8
from .metrics import MetricError
from .tensor_core import CheckpointError, DimensionError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FORMAT = 4

log = logging.getLogger("latentshift")


class DataError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--lambda-index", type=int, help="restrict to one lambda index")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--checkpoints", help="override checkpoint_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="latentshift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("train", parents=[common], help="train one model per lambda")

    enc = sub.add_parser("encode", parents=[common], help="compress one image")
    enc.add_argument("input")
    enc.add_argument("--no-shift", action="store_true", help="signal zero steps")
    enc.add_argument("--finetune-iters", type=int, default=0, help="optimise latents first")

    dec = sub.add_parser("decode", parents=[common], help="decompress one stream")
    dec.add_argument("input")

    ev = sub.add_parser("eval", parents=[common], help="RD curves and BD-rate table")
    ev.add_argument("--no-shift", action="store_true", help="baseline mode only")
    ev.add_argument("--finetune-iters", type=int, help="also run the fine-tune modes")
    ev.add_argument("--images", help="image directory (overrides eval_dir)")

    an = sub.add_parser("analyze", parents=[common], help="gradient correlations and stationarity")
    an.add_argument("--images", help="image directory (overrides eval_dir)")

    cx = sub.add_parser("complexity", parents=[common], help="timing and pass counts")
    cx.add_argument("--images", help="image directory (overrides eval_dir)")
    cx.add_argument("--finetune-iters", type=int)
    cx.add_argument("--repeats", type=int, default=3)
    return parser


# -- helpers ------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.checkpoints:
        cfg = replace(cfg, checkpoint_dir=args.checkpoints)
    if args.lambda_index is not None and not 0 <= args.lambda_index < len(cfg.lambdas):
        raise ConfigError(f"--lambda-index {args.lambda_index} outside 0..{len(cfg.lambdas) - 1}")
    return cfg


def _indices(args, cfg: RunConfig) -> list[int]:
    return [args.lambda_index] if args.lambda_index is not None else list(range(len(cfg.lambdas)))


def _load_model(cfg: RunConfig, index: int) -> codec.CodecModel:
    path = cfg.checkpoint_path(index)
    if not path.exists():
        raise ConfigError(f"missing checkpoint for lambda index {index}: {path}")
    return codec.CodecModel.load(path)


def _eval_images(args, cfg: RunConfig) -> list[tuple[str, np.ndarray]]:
    source = getattr(args, "images", None) or cfg.eval_dir
    try:
        imgs = images.read_dir(source) if source else images.builtin_images("heldout")
    except (FileNotFoundError, images.ImageFormatError) as exc:
        raise DataError(str(exc)) from exc
    crop = cfg.eval_crop
    out = []
    for name, img in imgs:
        if img.shape[0] < crop or img.shape[1] < crop:
            # Small inputs are coded whole, trimmed to the downsampling grid.
            trimmed = images.crop_to_multiple(img, 32)
            if trimmed.size == 0:
                raise DataError(f"{name}: image {img.shape[:2]} is smaller than 32x32")
            out.append((name, trimmed))
        else:
            out.extend(images.grid_crops([(name, img)], crop, cfg.eval_crops_per_image))
    return out


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> None:
    cfg = _config(args)
    tcfg = cfg.train_config()
    try:
        data = images.read_dir(cfg.train_dir) if cfg.train_dir else images.builtin_images("train")
    except (FileNotFoundError, images.ImageFormatError) as exc:
        raise DataError(str(exc)) from exc
    pictures = [img for _, img in data]
    out = Path(args.out or cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k in _indices(args, cfg):
        lam = cfg.lambdas[k]
        log.info("training lambda index %d (lambda=%g) for %d steps", k, lam, tcfg.iterations)
        result = codec.train(tcfg, pictures, lam, lambda_index=k)
        result.model.save(out / f"model_{k}.ckpt")
        with open(out / f"losses_{k}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            w.writerows((i, f"{v:.6f}") for i, v in enumerate(result.losses))
        print(f"lambda index {k}: final loss {result.losses[-1]:.2f} -> {out / f'model_{k}.ckpt'}")


def cmd_encode(args) -> None:
    cfg = _config(args)
    index = args.lambda_index if args.lambda_index is not None else 0
    model = _load_model(cfg, index)
    try:
        x8 = images.read_image(args.input)
    except (OSError, images.ImageFormatError) as exc:
        raise DataError(str(exc)) from exc
    x = images.to_float(x8)
    latents = None
    if args.finetune_iters:
        latents = codec.finetune_latents(x, model, args.finetune_iters, seed=cfg.seed).latents
    result = codec.encode_with_details(x, model, shift_enabled=not args.no_shift, latents=latents)
    data = result.stream_bytes
    out = Path(args.out or Path(args.input).with_suffix(".gsls"))
    out.write_bytes(data)
    bpp = 8 * len(data) / (x.shape[0] * x.shape[1])
    print(f"{out}: {len(data)} bytes, {bpp:.4f} bpp, steps {result.stream.rho_f_index}/{result.stream.rho_h_index}")


def cmd_decode(args) -> None:
    cfg = _config(args)
    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        raise DataError(str(exc)) from exc
    stream = Bitstream.from_bytes(data)
    model = _load_model(cfg, stream.lambda_index)
    img = image8(codec.decode(stream, model))
    out = Path(args.out or Path(args.input).with_suffix(".ppm"))
    images.write_image(out, img)
    print(f"{out}: {stream.width}x{stream.height}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    models = [_load_model(cfg, k) for k in _indices(args, cfg)]
    modes = ["baseline"] if args.no_shift else ["baseline", "shift"]
    if args.finetune_iters:
        modes += ["finetune"] if args.no_shift else ["finetune", "finetune+shift"]
    pictures = _eval_images(args, cfg)
    records = harness.evaluate(models, pictures, modes, args.finetune_iters or cfg.finetune_iters, cfg.seed)
    out = _out_dir(args, "results")
    harness.write_records(out / "rd_records.csv", records)
    if len(models) >= 4:
        table = harness.bd_table(harness.rd_curves(records))
        harness.write_bd_table(out / "bd_rate.csv", table)
        print(harness.summary(table))
    else:
        log.warning("BD-rate needs at least 4 lambdas; wrote per-image records only")
    print(f"{len(records)} records -> {out / 'rd_records.csv'}")


def cmd_analyze(args) -> None:
    cfg = _config(args)
    indices = _indices(args, cfg)
    models = [_load_model(cfg, k) for k in indices]
    pictures = [(name, images.to_float(img)) for name, img in _eval_images(args, cfg)]
    survey = analysis.correlation_survey(models, pictures)
    out = _out_dir(args, "results")
    analysis.write_survey(survey, out)
    same_size = [x for _, x in pictures if x.shape == pictures[0][1].shape]
    reports = []
    for k, model in zip(indices, models):
        init = codec.init_model(model.arch, model.lam, cfg.seed, k)
        reports.append((f"init_{k}", analysis.kkt_residuals(init, same_size)))
        reports.append((f"trained_{k}", analysis.kkt_residuals(model, same_size)))
    analysis.write_kkt(reports, out / "kkt.csv")
    print(f"mean corr_main {survey.mean_corr_main:+.4f}, mean corr_side {survey.mean_corr_side:+.4f}")


def cmd_complexity(args) -> None:
    cfg = _config(args)
    index = args.lambda_index if args.lambda_index is not None else 0
    model = _load_model(cfg, index)
    pictures = [img for _, img in _eval_images(args, cfg)]
    iters = args.finetune_iters if args.finetune_iters is not None else cfg.finetune_iters
    record = harness.measure_complexity(model, pictures, iters, args.repeats, cfg.seed)
    out = _out_dir(args, "results")
    harness.write_complexity(out / "complexity.csv", record)
    for key, value in record.rows():
        print(f"{key:<26} {value}")


COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "complexity": cmd_complexity,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, harness.ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionError, MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, CheckpointError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
