"""Hyperprior autoencoder: transforms, RD loss, training and the coding pipeline.

Rate is measured in bits per image and distortion as MSE on [0, 1] pixels.
The trade-off weight applied to the MSE is ``lam * 255**2 * pixels``, which
puts ``lam`` on the same scale as the usual ``bpp + lam * 255**2 * MSE``
objective, so the lambda grid ``{0.003, 0.01, 0.03, 0.1}`` lands in a
familiar bitrate range.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import entropy_models as em
from . import latent_shift as ls
from . import range_coder as rc
from . import tensor_core as tc
from .bitstream import Bitstream, FormatError

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.003, 0.01, 0.03, 0.1)


@dataclass(frozen=True)
class Architecture:
    analysis_channels: tuple[int, int] = (32, 64)
    main_channels: int = 64
    hyper_channels: int = 64
    side_channels: int = 32
    analysis_kernel: int = 3
    synthesis_kernel: int = 4

    @property
    def downsampling(self) -> int:
        return 32

    @property
    def main_factor(self) -> int:
        return 8


@dataclass
class PassCounter:
    """Instrumented call counts for transforms and entropy-gradient evaluations."""

    analysis: int = 0
    synthesis: int = 0
    hyper_analysis: int = 0
    hyper_synthesis: int = 0
    gradient: int = 0

    def reset(self) -> None:
        self.analysis = self.synthesis = self.hyper_analysis = self.hyper_synthesis = self.gradient = 0

    def snapshot(self) -> dict[str, int]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class CodecModel:
    g_a: tuple[tc.LayerParams, ...]
    g_s: tuple[tc.LayerParams, ...]
    h_a: tuple[tc.LayerParams, ...]
    h_s: tuple[tc.LayerParams, ...]
    prior: em.FactorizedModel
    lam: float
    lambda_index: int = 0
    arch: Architecture = Architecture()
    counter: PassCounter = field(default_factory=PassCounter, compare=False, repr=False)

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        o = self.g_a[-1].out_channels
        if self.g_s[0].in_channels != o or self.h_a[0].in_channels != o:
            raise tc.DimensionError("main latent width differs between g_a, g_s and h_a")
        if self.h_s[-1].out_channels != 2 * o:
            raise tc.DimensionError(f"h_s must output {2 * o} channels, got {self.h_s[-1].out_channels}")
        if self.h_a[-1].out_channels != self.prior.channels:
            raise tc.DimensionError("factorized prior width differs from h_a output")

    # -- counted transforms --------------------------------------------------

    def analysis(self, x: np.ndarray) -> np.ndarray:
        self.counter.analysis += 1
        return tc.sequential_forward(x, list(self.g_a))[0]

    def hyper_analysis(self, y: np.ndarray) -> np.ndarray:
        self.counter.hyper_analysis += 1
        return tc.sequential_forward(y, list(self.h_a))[0]

    def hyper_synthesis(self, z: np.ndarray) -> em.GaussianConditional:
        self.counter.hyper_synthesis += 1
        return em.conditional_model(z, list(self.h_s))

    def synthesis(self, y: np.ndarray) -> np.ndarray:
        self.counter.synthesis += 1
        return tc.sequential_forward(y, list(self.g_s))[0]

    def side_entropy_grad(self, z: np.ndarray) -> np.ndarray:
        self.counter.gradient += 1
        return self.prior.grad_bits(z)

    def main_entropy_grad(self, y: np.ndarray, cond: em.GaussianConditional) -> np.ndarray:
        self.counter.gradient += 1
        return cond.grad_bits(y)

    def distortion_weight(self, pixels: int) -> float:
        return self.lam * 255.0**2 * pixels

    # -- parameters ------------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("g_a", "g_s", "h_a", "h_s"):
            for i, layer in enumerate(getattr(self, name)):
                if layer.kind != tc.ACTIVATION:
                    out[f"{name}.{i}.w"] = layer.weights
                    out[f"{name}.{i}.b"] = layer.bias
        out["prior.loc"] = self.prior.loc
        out["prior.log_scale"] = self.prior.log_scale
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> "CodecModel":
        stacks = {}
        for name in ("g_a", "g_s", "h_a", "h_s"):
            layers = []
            for i, layer in enumerate(getattr(self, name)):
                key = f"{name}.{i}"
                if layer.kind != tc.ACTIVATION and f"{key}.w" in params:
                    layer = layer.replace(params[f"{key}.w"], params[f"{key}.b"])
                layers.append(layer)
            stacks[name] = tuple(layers)
        prior = em.FactorizedModel(
            params.get("prior.loc", self.prior.loc), params.get("prior.log_scale", self.prior.log_scale)
        )
        return replace(self, prior=prior, counter=PassCounter(), **stacks)

    def to_bytes(self) -> bytes:
        """Serialise via the ``GSC1`` layer checkpoint format.

        A leading param record holds ``[lam, lambda_index, |g_a|, |g_s|,
        |h_a|, |h_s|]``; the prior follows the four stacks.
        """
        meta = np.array(
            [self.lam, self.lambda_index, len(self.g_a), len(self.g_s), len(self.h_a), len(self.h_s)],
            np.float64,
        )
        layers = [tc.LayerParams(tc.PARAM, meta)]
        layers += [*self.g_a, *self.g_s, *self.h_a, *self.h_s]
        layers.append(tc.LayerParams(tc.PARAM, self.prior.loc, self.prior.log_scale))
        return tc.layers_to_bytes(layers)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodecModel":
        layers = tc.layers_from_bytes(data)
        meta = layers[0].weights
        lam, lam_idx = float(meta[0]), int(meta[1])
        sizes = [int(v) for v in meta[2:6]]
        if len(layers) != 2 + sum(sizes):
            raise tc.CheckpointError("layer count does not match checkpoint header")
        stacks, pos = [], 1
        for n in sizes:
            stacks.append(tuple(layers[pos : pos + n]))
            pos += n
        prior_rec = layers[pos]
        g_a, g_s, h_a, h_s = stacks
        arch = Architecture(
            analysis_channels=(g_a[0].out_channels, g_a[2].out_channels),
            main_channels=g_a[-1].out_channels,
            hyper_channels=h_a[0].out_channels,
            side_channels=h_a[-1].out_channels,
            analysis_kernel=g_a[0].kernel,
            synthesis_kernel=g_s[0].kernel,
        )
        prior = em.FactorizedModel(prior_rec.weights, prior_rec.bias)
        return cls(g_a, g_s, h_a, h_s, prior, lam, lam_idx, arch)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CodecModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_model(arch: Architecture, lam: float, seed: int, lambda_index: int = 0) -> CodecModel:
    """He-initialised model; the last synthesis bias starts at mid-grey."""
    rng = np.random.default_rng(seed)
    ka, ks = arch.analysis_kernel, arch.synthesis_kernel
    pa, ps = ka // 2, (ks - 2) // 2

    def conv(cin, cout):
        w = rng.normal(0.0, np.sqrt(2.0 / (ka * ka * cin)), (ka, ka, cin, cout))
        return tc.conv_layer(w, np.zeros(cout), 2, pa)

    def tconv(cin, cout):
        w = rng.normal(0.0, np.sqrt(2.0 / (ks * ks * cin / 4)), (ks, ks, cin, cout))
        return tc.transposed_conv_layer(w, np.zeros(cout), 2, ps)

    act = tc.activation_layer()
    c1, c2 = arch.analysis_channels
    o, hh, f = arch.main_channels, arch.hyper_channels, arch.side_channels
    g_a = (conv(3, c1), act, conv(c1, c2), act, conv(c2, o))
    last = tconv(c1, 3)
    last = last.replace(last.weights * 0.1, np.full(3, 0.5))
    g_s = (tconv(o, c2), act, tconv(c2, c1), act, last)
    h_a = (conv(o, hh), act, conv(hh, f))
    hs_last = tconv(hh, 2 * o)
    # softplus^-1(0.89) ~= 0.33: initial scales near 1.
    bias = np.concatenate([np.zeros(o), np.full(o, 0.33)])
    hs_last = hs_last.replace(hs_last.weights * 0.1, bias)
    h_s = (tconv(f, hh), act, hs_last)
    prior = em.FactorizedModel(np.zeros(f), np.zeros(f))
    return CodecModel(g_a, g_s, h_a, h_s, prior, lam, lambda_index, arch)


# -- quantisation and latents ------------------------------------------------


def quantize(y: np.ndarray, mode: str = "round", rng: np.random.Generator | None = None) -> np.ndarray:
    """``round``: nearest integer, ties to even.  ``noise``: add U(-1/2, 1/2)."""
    if mode == "round":
        return np.rint(y)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantisation needs a seeded generator")
        return y + rng.uniform(-0.5, 0.5, size=np.shape(y))
    raise ValueError(f"unknown quantisation mode {mode!r}")


CONTINUOUS, ROUNDED, SHIFTED = "continuous", "rounded", "shifted"


@dataclass(frozen=True)
class LatentPair:
    y_hat: np.ndarray
    z_hat: np.ndarray
    state: str = ROUNDED

    def __post_init__(self):
        if self.state not in (CONTINUOUS, ROUNDED, SHIFTED):
            raise ValueError(f"unknown latent state {self.state!r}")
        if self.state == ROUNDED and not (
            np.array_equal(self.y_hat, np.rint(self.y_hat)) and np.array_equal(self.z_hat, np.rint(self.z_hat))
        ):
            raise ValueError("rounded latents must hold integers")


def analyse(x: np.ndarray, model: CodecModel) -> LatentPair:
    y = model.analysis(x)
    z = model.hyper_analysis(y)
    return LatentPair(y, z, CONTINUOUS)


def baseline_latents(x: np.ndarray, model: CodecModel) -> LatentPair:
    pair = analyse(x, model)
    return LatentPair(quantize(pair.y_hat), quantize(pair.z_hat), ROUNDED)


# -- loss --------------------------------------------------------------------


class RDLossError(tc.TrainingError):
    pass


@dataclass(frozen=True)
class LossTerms:
    total: float
    main_bits: float
    side_bits: float
    distortion: float
    distortion_weight: float


def _check_image(x: np.ndarray) -> None:
    if x.ndim != 3 or x.shape[-1] != 3:
        raise tc.DimensionError(f"image must be (H, W, 3), got {x.shape}")


def _latent_terms(x, y_t, z_t, model: CodecModel, need_params: bool, y_dec=None, z_dec=None):
    """Loss of (possibly batched) relaxed latents plus gradients.

    Rates are evaluated at ``y_t``/``z_t``.  The synthesis and hyper-synthesis
    inputs default to the same values; passing ``y_dec``/``z_dec`` (e.g. the
    rounded latents) feeds those instead, with gradients passed straight
    through to the shared latent.

    Returns ``(per-image LossTerms list, grad_y, grad_z, param_grads)``
    where gradients are of the batch-mean total loss.
    """
    y_dec = y_t if y_dec is None else y_dec
    z_dec = z_t if z_dec is None else z_dec
    lead = x.shape[:-3]
    batch = int(np.prod(lead)) if lead else 1
    pixels = x.shape[-3] * x.shape[-2]
    weight = model.distortion_weight(pixels)

    side = model.prior.bit_terms(z_t)
    hs_out, hs_in = tc.sequential_forward(z_dec, list(model.h_s))
    cond = em.split_hyper_output(hs_out)
    main = cond.bit_terms(y_t)
    x_hat, gs_in = tc.sequential_forward(y_dec, list(model.g_s))
    err = x_hat - x

    main_img = main.bits.sum(axis=(-3, -2, -1))
    side_img = side.bits.sum(axis=(-3, -2, -1))
    mse_img = np.mean(err * err, axis=(-3, -2, -1))
    total_img = main_img + side_img + weight * mse_img
    terms = [
        LossTerms(float(t), float(m), float(s), float(d), weight)
        for t, m, s, d in zip(np.ravel(total_img), np.ravel(main_img), np.ravel(side_img), np.ravel(mse_img))
    ]
    for t in terms:
        for name in ("main_bits", "side_bits", "distortion"):
            if not np.isfinite(getattr(t, name)):
                raise RDLossError(f"non-finite {name} in RD loss")

    g_xhat = err * (2.0 * weight / (err.shape[-3] * err.shape[-2] * err.shape[-1] * batch))
    g_y, gs_grads = tc.sequential_backward(gs_in, list(model.g_s), g_xhat, need_params)
    g_y = g_y + main.d_value / batch
    g_hs = em.hyper_output_grad(hs_out, main) / batch
    g_z, hs_grads = tc.sequential_backward(hs_in, list(model.h_s), g_hs, need_params)
    g_z = g_z + side.d_value / batch
    param_grads = {}
    if need_params:
        _collect(param_grads, "g_s", gs_grads)
        _collect(param_grads, "h_s", hs_grads)
        axes = tuple(range(side.d_loc.ndim - 1))
        param_grads["prior.loc"] = side.d_loc.sum(axis=axes) / batch
        param_grads["prior.log_scale"] = side.d_scale.sum(axis=axes) / batch
    return terms, g_y, g_z, param_grads


def _collect(out: dict, name: str, grads: list[tc.LayerParams]) -> None:
    for i, g in enumerate(grads):
        if g.kind != tc.ACTIVATION:
            out[f"{name}.{i}.w"] = g.weights
            out[f"{name}.{i}.b"] = g.bias


def latent_loss(x: np.ndarray, latents: LatentPair, model: CodecModel) -> LossTerms:
    """RD loss of given latents used as-is (no further quantisation)."""
    _check_image(x)
    terms, _, _, _ = _latent_terms(x, latents.y_hat, latents.z_hat, model, need_params=False)
    return terms[0]


def loss(
    x: np.ndarray, model: CodecModel, mode: str = "round", rng: np.random.Generator | None = None
) -> LossTerms:
    """RD loss of one image: bits(main) + bits(side) + weight * MSE."""
    _check_image(x)
    pair = analyse(x, model)
    y_t = quantize(pair.y_hat, mode, rng)
    z_t = quantize(pair.z_hat, mode, rng)
    return _latent_terms(x, y_t, z_t, model, need_params=False)[0][0]


QUANTIZATION_MODES = ("noise", "mixed")


def loss_and_grads(
    x: np.ndarray, model: CodecModel, rng: np.random.Generator, quantization: str = "noise"
) -> tuple[list[LossTerms], dict[str, np.ndarray]]:
    """Relaxed RD loss of a batch ``(B, H, W, 3)`` and its parameter gradients.

    ``noise``: every use of a latent sees ``latent + U(-1/2, 1/2)``.
    ``mixed``: rates still see the noisy latents, but synthesis and
    hyper-synthesis see the rounded ones (straight-through gradient), so the
    decoders are trained on the values they will receive at decode time.
    """
    if quantization not in QUANTIZATION_MODES:
        raise ValueError(f"unknown training quantisation {quantization!r}")
    y, ga_in = tc.sequential_forward(x, list(model.g_a))
    z, ha_in = tc.sequential_forward(y, list(model.h_a))
    y_t = y + rng.uniform(-0.5, 0.5, y.shape)
    z_t = z + rng.uniform(-0.5, 0.5, z.shape)
    y_dec = z_dec = None
    if quantization == "mixed":
        y_dec, z_dec = np.rint(y), np.rint(z)
    terms, g_yt, g_zt, grads = _latent_terms(x, y_t, z_t, model, True, y_dec, z_dec)
    g_y_hyper, ha_grads = tc.sequential_backward(ha_in, list(model.h_a), g_zt)
    _, ga_grads = tc.sequential_backward(ga_in, list(model.g_a), g_yt + g_y_hyper, need_input=False)
    _collect(grads, "h_a", ha_grads)
    _collect(grads, "g_a", ga_grads)
    return terms, grads


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    iterations: int = 2000
    lambdas: tuple[float, ...] = LAMBDA_GRID
    seed: int = 0
    dataset: str = ""
    crop: int = 64
    arch: Architecture = Architecture()
    lr_decay_at: float = 0.8
    quantization: str = "noise"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("learning rate, batch size and iterations must be positive")
        if not self.lambdas or min(self.lambdas) <= 0:
            raise ValueError("lambdas must be positive")
        if self.quantization not in QUANTIZATION_MODES:
            raise ValueError(f"quantization must be one of {QUANTIZATION_MODES}")
        if self.crop % self.arch.downsampling:
            raise ValueError(f"crop {self.crop} is not a multiple of {self.arch.downsampling}")


@dataclass
class TrainResult:
    model: CodecModel
    losses: list[float]
    checkpoints: list[CodecModel] = field(default_factory=list)


def random_crops(
    images: Sequence[np.ndarray], crop: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Sample ``count`` random crops (with random horizontal flips) as [0, 1] floats."""
    out = np.empty((count, crop, crop, 3))
    for n in range(count):
        img = images[rng.integers(len(images))]
        i = rng.integers(img.shape[0] - crop + 1)
        j = rng.integers(img.shape[1] - crop + 1)
        patch = img[i : i + crop, j : j + crop]
        if rng.random() < 0.5:
            patch = patch[:, ::-1]
        out[n] = patch
    return out / 255.0 if images[0].dtype == np.uint8 else out


def train(
    config: TrainConfig,
    images: Sequence[np.ndarray],
    lam: float,
    lambda_index: int = 0,
    checkpoint_every: int = 0,
    init: CodecModel | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Minimise the batch-mean noise-relaxed RD loss with Adam."""
    if not images:
        raise ValueError("empty training set")
    for img in images:
        if img.shape[0] < config.crop or img.shape[1] < config.crop:
            raise tc.DimensionError(f"training image {img.shape} smaller than crop {config.crop}")
    rng = np.random.default_rng(config.seed)
    model = init if init is not None else init_model(config.arch, lam, config.seed, lambda_index)
    params = model.params()
    state = tc.AdamState()
    losses: list[float] = []
    checkpoints: list[CodecModel] = []
    decay_at = int(config.lr_decay_at * config.iterations)
    for it in range(config.iterations):
        batch = random_crops(images, config.crop, config.batch_size, rng)
        terms, grads = loss_and_grads(batch, model, rng, config.quantization)
        value = float(np.mean([t.total for t in terms]))
        if not np.isfinite(value):
            raise tc.TrainingError(f"loss diverged at iteration {it}")
        losses.append(value)
        lr = config.learning_rate * (0.1 if it >= decay_at else 1.0)
        params, state = tc.adam_step(params, grads, state, lr)
        model = model.with_params(params)
        if progress is not None:
            progress(it, value)
        if checkpoint_every and (it + 1) % checkpoint_every == 0:
            checkpoints.append(model)
    return TrainResult(model, losses, checkpoints)


# -- latent fine-tuning -------------------------------------------------------


@dataclass
class FinetuneResult:
    latents: LatentPair
    baseline_loss: float
    final_loss: float
    trajectory: list[float]
    diverged: bool = False


def finetune_latents(
    x: np.ndarray,
    model: CodecModel,
    iterations: int = 1000,
    learning_rate: float = 0.01,
    seed: int = 0,
) -> FinetuneResult:
    """Per-image optimisation of the continuous latents with frozen networks.

    Steps follow the noise-relaxed loss; after each step the rounded latents
    are scored and kept only if they lower the rounded RD loss, so the
    returned trajectory is non-increasing and never above the baseline.
    """
    _check_image(x)
    rng = np.random.default_rng(seed)
    pair = analyse(x, model)
    base = LatentPair(quantize(pair.y_hat), quantize(pair.z_hat))
    best_loss = latent_loss(x, base, model).total
    baseline = best_loss
    best = base
    trajectory = [best_loss]
    params = {"y": pair.y_hat, "z": pair.z_hat}
    state = tc.AdamState()
    diverged = False
    for _ in range(iterations):
        y_t = params["y"] + rng.uniform(-0.5, 0.5, params["y"].shape)
        z_t = params["z"] + rng.uniform(-0.5, 0.5, params["z"].shape)
        try:
            _, g_y, g_z, _ = _latent_terms(x, y_t, z_t, model, need_params=False)
            params, state = tc.adam_step(params, {"y": g_y, "z": g_z}, state, learning_rate)
            candidate = LatentPair(quantize(params["y"]), quantize(params["z"]))
            value = latent_loss(x, candidate, model).total
        except (tc.TrainingError, em.EvaluationError):
            diverged = True
            break
        if value < best_loss:
            best, best_loss = candidate, value
        trajectory.append(best_loss)
    return FinetuneResult(best, baseline, best_loss, trajectory, diverged)


# -- coding pipeline ----------------------------------------------------------


@dataclass
class EncodeResult:
    stream: Bitstream
    latents: LatentPair
    decision: ls.ShiftDecision
    y_used: np.ndarray

    @property
    def stream_bytes(self) -> bytes:
        return self.stream.to_bytes()


def _side_pmfs(model: CodecModel, shape: tuple[int, ...]) -> list[em.DiscretePMF]:
    per_channel = model.prior.pmfs()
    count = int(np.prod(shape[:-1]))
    return per_channel * count


def _check_dims(h: int, w: int, model: CodecModel) -> None:
    d = model.arch.downsampling
    if h % d or w % d:
        raise tc.DimensionError(f"image {h}x{w} is not a multiple of {d}")


def encode_with_details(
    x: np.ndarray, model: CodecModel, shift_enabled: bool = True, latents: LatentPair | None = None
) -> EncodeResult:
    _check_image(x)
    h, w = x.shape[:2]
    _check_dims(h, w, model)
    if latents is None:
        latents = baseline_latents(x, model)
    y_hat, z_hat = latents.y_hat, latents.z_hat
    side = rc.encode_symbols(z_hat.astype(np.int64).ravel().tolist(), _side_pmfs(model, z_hat.shape))
    cond = model.hyper_synthesis(z_hat)
    decision = ls.ShiftDecision()
    y_used = y_hat
    if shift_enabled:
        decision.rho_f_index, _, cond, decision.main_bits = ls.select_rho_f(y_hat, z_hat, model)
    main = rc.encode_symbols(y_hat.astype(np.int64).ravel().tolist(), cond.pmfs())
    if shift_enabled:
        decision.rho_h_index, y_used, decision.distortions = ls.select_rho_h(x, y_hat, cond, model)
    stream = Bitstream(w, h, model.lambda_index, decision.rho_f_index, decision.rho_h_index, side, main)
    return EncodeResult(stream, latents, decision, y_used)


def encode(x: np.ndarray, model: CodecModel, shift_enabled: bool = True) -> Bitstream:
    return encode_with_details(x, model, shift_enabled).stream


def reconstruct(result: EncodeResult, model: CodecModel) -> np.ndarray:
    """The encoder's own reconstruction, for closed-loop checks."""
    return model.synthesis(result.y_used)


def decode(stream: Bitstream | bytes, model: CodecModel) -> np.ndarray:
    """Rebuild the image from the stream alone; returns float pixels."""
    if isinstance(stream, (bytes, bytearray)):
        stream = Bitstream.from_bytes(bytes(stream))
    if stream.lambda_index != model.lambda_index:
        raise FormatError(f"stream lambda index {stream.lambda_index} != model's {model.lambda_index}")
    _check_dims(stream.height, stream.width, model)
    d, m = model.arch.downsampling, model.arch.main_factor
    z_shape = (stream.height // d, stream.width // d, model.prior.channels)
    y_shape = (stream.height // m, stream.width // m, model.arch.main_channels)
    try:
        z_sym = rc.decode_symbols(stream.side_payload, _side_pmfs(model, z_shape))
        z_hat = np.asarray(z_sym, np.float64).reshape(z_shape)
        z_used = ls.shift_side(z_hat, model, stream.rho_f_index)
        cond = model.hyper_synthesis(z_used)
        y_sym = rc.decode_symbols(stream.main_payload, cond.pmfs())
    except rc.CoderError as exc:
        raise FormatError(f"corrupt payload: {exc}") from exc
    y_hat = np.asarray(y_sym, np.float64).reshape(y_shape)
    y_used = ls.shift_main(y_hat, cond, model, stream.rho_h_index)
    return model.synthesis(y_used)


def model_digest(model: CodecModel) -> str:
    """SHA-256 of the serialised checkpoint, for determinism checks."""
    return hashlib.sha256(model.to_bytes()).hexdigest()
