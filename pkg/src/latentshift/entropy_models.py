"""Entropy models for side and main codes.

Both densities are convolved with ``U(-1/2, 1/2)``, so the probability of an
integer symbol ``v`` is ``C(v + 1/2) - C(v - 1/2)``.  All bit counts are base 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import expit, ndtr

from . import tensor_core as tc

SIGMA_MIN = 0.11
LIKELIHOOD_FLOOR = 2.0**-30
PMF_PRECISION = 16
PMF_TOTAL = 1 << PMF_PRECISION
ESCAPE_FREQ = 1
# Half-width of the coded support in units of the scale.
GAUSSIAN_TAIL = 6.0
LOGISTIC_TAIL = 12.0
MAX_HALF_SUPPORT = 2047

_LN2 = math.log(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class EvaluationError(ValueError):
    """Raised when an entropy model is evaluated on non-finite input."""


@dataclass
class BitTerms:
    """Per-element bits and their partial derivatives.

    ``d_value``, ``d_loc`` and ``d_scale`` are derivatives of the per-element
    bit count.  ``clamped`` counts elements whose likelihood hit the floor.
    """

    bits: np.ndarray
    d_value: np.ndarray
    d_loc: np.ndarray
    d_scale: np.ndarray
    clamped: int

    @property
    def total(self) -> float:
        return float(self.bits.sum())


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise EvaluationError("entropy model evaluated on non-finite input")


def _gaussian_pdf(t):
    return _INV_SQRT_2PI * np.exp(-0.5 * t * t)


def _logistic_pdf(t):
    return expit(t) * expit(-t)


def _interval_terms(v, loc, scale, cdf, pdf) -> BitTerms:
    v, loc, scale = np.broadcast_arrays(
        np.asarray(v, np.float64), np.asarray(loc, np.float64), np.asarray(scale, np.float64)
    )
    _check_finite(v, loc, scale)
    d = v - loc
    # Evaluate on the lower tail so small probabilities keep full precision.
    a = np.abs(d)
    p = cdf((0.5 - a) / scale) - cdf((-0.5 - a) / scale)
    upper = (d + 0.5) / scale
    lower = (d - 0.5) / scale
    pu, pl = pdf(upper), pdf(lower)
    dp_dd = (pu - pl) / scale
    dp_ds = -(upper * pu - lower * pl) / scale
    clamped = p < LIKELIHOOD_FLOOR
    p_safe = np.maximum(p, LIKELIHOOD_FLOOR)
    bits = -np.log2(p_safe)
    coef = -1.0 / (p_safe * _LN2)
    d_value = coef * dp_dd
    return BitTerms(bits, d_value, -d_value, coef * dp_ds, int(clamped.sum()))


def gaussian_likelihood(v, mean, scale) -> np.ndarray:
    """Probability of the unit interval centred on ``v`` under N(mean, scale^2)."""
    a = np.abs(np.asarray(v, np.float64) - mean)
    _check_finite(a, scale)
    return ndtr((0.5 - a) / scale) - ndtr((-0.5 - a) / scale)


def logistic_likelihood(v, loc, scale) -> np.ndarray:
    a = np.abs(np.asarray(v, np.float64) - loc)
    _check_finite(a, scale)
    return expit((0.5 - a) / scale) - expit((-0.5 - a) / scale)


def gaussian_bit_terms(v, mean, scale) -> BitTerms:
    return _interval_terms(v, mean, scale, ndtr, _gaussian_pdf)


def logistic_bit_terms(v, loc, scale) -> BitTerms:
    return _interval_terms(v, loc, scale, expit, _logistic_pdf)


# -- discretisation ----------------------------------------------------------


@dataclass(frozen=True)
class DiscretePMF:
    """Integer frequencies over symbols ``lo .. lo + len(freqs) - 1``.

    One extra escape slot of frequency :data:`ESCAPE_FREQ` sits after the
    last symbol; together they sum to exactly ``2**16``.
    """

    lo: int
    freqs: tuple[int, ...]

    def __post_init__(self):
        if not self.freqs:
            raise ValueError("empty PMF")
        if min(self.freqs) < 1:
            raise ValueError("PMF frequencies must be >= 1")
        if sum(self.freqs) + ESCAPE_FREQ != PMF_TOTAL:
            raise ValueError(f"PMF frequencies sum to {sum(self.freqs) + ESCAPE_FREQ}, not {PMF_TOTAL}")

    @property
    def hi(self) -> int:
        return self.lo + len(self.freqs) - 1

    @cached_property
    def cumulative(self) -> tuple[int, ...]:
        """Start offsets of every slot, escape included, followed by the total."""
        out = [0]
        for f in self.freqs:
            out.append(out[-1] + f)
        out.append(PMF_TOTAL)
        return tuple(out)

    def probabilities(self) -> np.ndarray:
        return np.asarray(self.freqs, np.float64) / PMF_TOTAL


def _support(loc: np.ndarray, scale: np.ndarray, tail: float) -> tuple[np.ndarray, np.ndarray]:
    half = np.minimum(tail * np.maximum(scale, SIGMA_MIN), MAX_HALF_SUPPORT)
    lo = np.floor(loc - half).astype(np.int64)
    hi = np.ceil(loc + half).astype(np.int64)
    return lo, hi


def quantize_frequencies(probs: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Largest-remainder quantisation of padded probability rows.

    ``probs`` is ``(rows, width)``; entries past ``lengths[r]`` are ignored.
    Each row's first ``lengths[r]`` outputs are >= 1 and sum to
    ``PMF_TOTAL - ESCAPE_FREQ``.
    """
    rows, width = probs.shape
    cols = np.arange(width)
    valid = cols[None, :] < lengths[:, None]
    p = np.where(valid, probs, 0.0)
    p = p / p.sum(axis=1, keepdims=True)
    budget = (PMF_TOTAL - ESCAPE_FREQ - lengths)[:, None].astype(np.float64)
    q = p * budget
    base = np.floor(q)
    frac = np.where(valid, q - base, -1.0)
    remainder = (budget[:, 0] - base.sum(axis=1)).round().astype(np.int64)
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(cols, order.shape), axis=1)
    bonus = rank < remainder[:, None]
    freqs = np.where(valid, 1 + base.astype(np.int64) + bonus, 0)
    return freqs


def discretize_batch(
    loc: np.ndarray, scale: np.ndarray, family: str = "gaussian"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`discretize` over flat arrays of sites.

    Returns ``(lo, lengths, freqs)`` where ``freqs`` is a zero-padded
    ``(sites, max_length)`` integer array.
    """
    loc = np.asarray(loc, np.float64).ravel()
    scale = np.asarray(scale, np.float64).ravel()
    if family == "gaussian":
        tail, likelihood = GAUSSIAN_TAIL, gaussian_likelihood
    elif family == "logistic":
        tail, likelihood = LOGISTIC_TAIL, logistic_likelihood
    else:
        raise ValueError(f"unknown family {family!r}")
    if np.any(scale < SIGMA_MIN * (1 - 1e-12)) and family == "gaussian":
        raise ValueError("scale below SIGMA_MIN")
    lo, hi = _support(loc, scale, tail)
    lengths = hi - lo + 1
    width = int(lengths.max()) if lengths.size else 1
    symbols = lo[:, None] + np.arange(width)[None, :]
    probs = likelihood(symbols, loc[:, None], scale[:, None])
    return lo, lengths, quantize_frequencies(probs, lengths)


def discretize(loc: float, scale: float, family: str = "gaussian") -> DiscretePMF:
    lo, lengths, freqs = discretize_batch(np.array([loc]), np.array([scale]), family)
    return DiscretePMF(int(lo[0]), tuple(int(f) for f in freqs[0, : lengths[0]]))


def pmfs_from_batch(lo: np.ndarray, lengths: np.ndarray, freqs: np.ndarray) -> list[DiscretePMF]:
    """Wrap padded frequency rows as PMFs.

    Validation and cumulative tables are done once for the whole batch in
    numpy, so the per-PMF cost does not grow with the support width.
    """
    valid = np.arange(freqs.shape[1])[None, :] < lengths[:, None]
    if np.any(valid & (freqs < 1)) or np.any(freqs.sum(axis=1) + ESCAPE_FREQ != PMF_TOTAL):
        raise ValueError("batch frequencies are not valid 16-bit PMFs")
    cum = np.zeros((freqs.shape[0], freqs.shape[1] + 1), np.int64)
    np.cumsum(freqs, axis=1, out=cum[:, 1:])
    # Flatten only the live entries so padding to the widest row costs nothing here.
    flat_f = freqs[valid].tolist()
    flat_c = cum[np.arange(cum.shape[1])[None, :] <= lengths[:, None]].tolist()
    out = []
    start = 0
    for row, (l, n) in enumerate(zip(lo.tolist(), lengths.tolist())):
        pmf = object.__new__(DiscretePMF)
        object.__setattr__(pmf, "lo", l)
        object.__setattr__(pmf, "freqs", tuple(flat_f[start : start + n]))
        pmf.__dict__["cumulative"] = (*flat_c[start + row : start + row + n + 1], PMF_TOTAL)
        out.append(pmf)
        start += n
    return out


# -- model objects -----------------------------------------------------------


@dataclass(frozen=True)
class FactorizedModel:
    """Per-channel logistic density for the side codes."""

    loc: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        if self.loc.shape != self.log_scale.shape or self.loc.ndim != 1:
            raise tc.DimensionError(
                f"loc {self.loc.shape} and log_scale {self.log_scale.shape} must be equal 1-D shapes"
            )

    @property
    def channels(self) -> int:
        return self.loc.shape[0]

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def _check(self, z: np.ndarray) -> None:
        if z.shape[-1] != self.channels:
            raise tc.DimensionError(f"latents {z.shape} do not match {self.channels} channels")

    def likelihood(self, z: np.ndarray) -> np.ndarray:
        self._check(z)
        return logistic_likelihood(z, self.loc, self.scale)

    def bit_terms(self, z: np.ndarray) -> BitTerms:
        self._check(z)
        scale = self.scale
        terms = logistic_bit_terms(z, self.loc, scale)
        # Chain to log-scale so training updates the stored parameter.
        terms.d_scale = terms.d_scale * scale
        return terms

    def bits(self, z: np.ndarray) -> float:
        return self.bit_terms(z).total

    def grad_bits(self, z: np.ndarray) -> np.ndarray:
        return self.bit_terms(z).d_value

    def pmfs(self) -> list[DiscretePMF]:
        """One PMF per channel."""
        return pmfs_from_batch(*discretize_batch(self.loc, self.scale, "logistic"))


@dataclass(frozen=True)
class GaussianConditional:
    """Gaussian density with per-element mean and scale grids."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.scale.shape:
            raise tc.DimensionError(f"mean {self.mean.shape} and scale {self.scale.shape} differ")

    def _check(self, y: np.ndarray) -> None:
        if y.shape != self.mean.shape:
            raise tc.DimensionError(f"latents {y.shape} do not match model grid {self.mean.shape}")

    def likelihood(self, y: np.ndarray) -> np.ndarray:
        self._check(y)
        return gaussian_likelihood(y, self.mean, self.scale)

    def bit_terms(self, y: np.ndarray) -> BitTerms:
        self._check(y)
        return gaussian_bit_terms(y, self.mean, self.scale)

    def bits(self, y: np.ndarray) -> float:
        return self.bit_terms(y).total

    def grad_bits(self, y: np.ndarray) -> np.ndarray:
        return self.bit_terms(y).d_value

    def pmfs(self) -> list[DiscretePMF]:
        """One PMF per element, in C order."""
        return pmfs_from_batch(*discretize_batch(self.mean, self.scale, "gaussian"))


# -- hyper-synthesis conditioning --------------------------------------------


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def split_hyper_output(out: np.ndarray) -> GaussianConditional:
    """Map raw hyper-synthesis output ``(..., 2*o)`` to mean and scale grids."""
    o = out.shape[-1] // 2
    return GaussianConditional(out[..., :o], SIGMA_MIN + softplus(out[..., o:]))


def hyper_output_grad(out: np.ndarray, terms: BitTerms) -> np.ndarray:
    """Gradient of summed bits w.r.t. the raw hyper-synthesis output."""
    o = out.shape[-1] // 2
    return np.concatenate([terms.d_loc, terms.d_scale * expit(out[..., o:])], axis=-1)


def conditional_model(z_hat: np.ndarray, hyper_synthesis: list[tc.LayerParams]) -> GaussianConditional:
    out, _ = tc.sequential_forward(z_hat, hyper_synthesis)
    return split_hyper_output(out)


def grad_main_bits_wrt_side(
    y_hat: np.ndarray, z_hat: np.ndarray, hyper_synthesis: list[tc.LayerParams]
) -> np.ndarray:
    """Gradient of the main-code bits with respect to the side latent."""
    out, inputs = tc.sequential_forward(z_hat, hyper_synthesis)
    model = split_hyper_output(out)
    terms = model.bit_terms(y_hat)
    grad, _ = tc.sequential_backward(inputs, hyper_synthesis, hyper_output_grad(out, terms), need_params=False)
    return grad
