"""Key-value run configuration.

One ``key = value`` pair per line; ``#`` starts a comment.  Recognised keys:

==================  ===========================================  ==============
key                 meaning                                      default
==================  ===========================================  ==============
seed                RNG seed for init, crops and fine-tuning     0
lambdas             comma-separated RD weights, one per index    0.003,0.01,0.03,0.1
iterations          training steps per lambda                    2000
learning_rate       Adam step size                               0.001
batch_size          crops per step                               8
crop                training crop side (multiple of 32)          64
lr_decay_at         fraction of steps after which lr drops 10x   0.8
quantization        training relaxation: noise or mixed          noise
analysis_channels   two hidden widths of the analysis stack      32,64
main_channels       main latent channels                         64
hyper_channels      hidden width of the hyper stacks             64
side_channels       side latent channels                         32
step_table_version  must match the bitstream version             2
train_dir           directory of .ppm/.png training images       (bundled set)
eval_dir            directory of .ppm/.png evaluation images     (bundled set)
eval_crop           side of the square evaluation crops          128
eval_crops_per_image crops taken from each evaluation image      2
checkpoint_dir      where ``train`` writes and others read       checkpoints
finetune_iters      latent fine-tuning steps                     1000
==================  ===========================================  ==============
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .bitstream import VERSION
from .codec import LAMBDA_GRID, Architecture, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    lambdas: tuple[float, ...] = LAMBDA_GRID
    iterations: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 8
    crop: int = 64
    lr_decay_at: float = 0.8
    quantization: str = "noise"
    analysis_channels: tuple[int, ...] = (32, 64)
    main_channels: int = 64
    hyper_channels: int = 64
    side_channels: int = 32
    step_table_version: int = VERSION
    train_dir: str = ""
    eval_dir: str = ""
    eval_crop: int = 128
    eval_crops_per_image: int = 2
    checkpoint_dir: str = "checkpoints"
    finetune_iters: int = 1000
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.step_table_version != VERSION:
            raise ConfigError(
                f"step_table_version {self.step_table_version} does not match bitstream version {VERSION}"
            )
        if len(self.analysis_channels) != 2:
            raise ConfigError("analysis_channels needs exactly two widths")

    @property
    def arch(self) -> Architecture:
        return Architecture(
            analysis_channels=tuple(self.analysis_channels),
            main_channels=self.main_channels,
            hyper_channels=self.hyper_channels,
            side_channels=self.side_channels,
        )

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                learning_rate=self.learning_rate,
                batch_size=self.batch_size,
                iterations=self.iterations,
                lambdas=self.lambdas,
                seed=self.seed,
                dataset=self.train_dir,
                crop=self.crop,
                arch=self.arch,
                lr_decay_at=self.lr_decay_at,
                quantization=self.quantization,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def checkpoint_path(self, lambda_index: int) -> Path:
        return Path(self.checkpoint_dir) / f"model_{lambda_index}.ckpt"


def _tuple_of(kind):
    def parse(text: str):
        return tuple(kind(v) for v in text.split(",") if v.strip())

    return parse


_PARSERS = {
    "seed": int,
    "lambdas": _tuple_of(float),
    "iterations": int,
    "learning_rate": float,
    "batch_size": int,
    "crop": int,
    "lr_decay_at": float,
    "quantization": str,
    "analysis_channels": _tuple_of(int),
    "main_channels": int,
    "hyper_channels": int,
    "side_channels": int,
    "step_table_version": int,
    "train_dir": str,
    "eval_dir": str,
    "eval_crop": int,
    "eval_crops_per_image": int,
    "checkpoint_dir": str,
    "finetune_iters": int,
}

assert set(_PARSERS) == {f.name for f in fields(RunConfig)} - {"extra"}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None
    )
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    for key, raw in parser["run"].items():
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _PARSERS[key](raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return replace(base or RunConfig(), **values)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
