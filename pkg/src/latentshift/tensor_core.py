"""Dense float64 layers with hand-derived gradients.

Tensors are plain ``numpy.ndarray`` objects laid out as ``(..., H, W, C)``;
any number of leading batch axes is accepted.  Convolution weights are stored
as ``(k, k, c_in, c_out)`` for both the strided and the transposed variant.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Mapping

import numpy as np

LEAKY_SLOPE = 0.01

CONV = "conv"
TRANSPOSED_CONV = "transposed-conv"
ACTIVATION = "activation"
PARAM = "param"

_KIND_CODES = {CONV: 0, TRANSPOSED_CONV: 1, ACTIVATION: 2, PARAM: 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

CHECKPOINT_MAGIC = b"GSC1"


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class TrainingError(RuntimeError):
    """Raised when an optimisation step meets a non-finite value."""


class CheckpointError(ValueError):
    """Raised for a malformed parameter checkpoint."""


_EMPTY = np.zeros(0)


@dataclass(frozen=True)
class LayerParams:
    kind: str
    weights: np.ndarray = field(default_factory=lambda: _EMPTY)
    bias: np.ndarray = field(default_factory=lambda: _EMPTY)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.kind in (CONV, TRANSPOSED_CONV):
            w = self.weights
            if w.ndim != 4 or w.shape[0] != w.shape[1]:
                raise DimensionError(f"weights must be (k, k, c_in, c_out), got {w.shape}")
            if self.bias.shape != (w.shape[3],):
                raise DimensionError(
                    f"bias shape {self.bias.shape} does not match c_out={w.shape[3]}"
                )

    @property
    def kernel(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    def replace(self, weights: np.ndarray, bias: np.ndarray) -> "LayerParams":
        return LayerParams(self.kind, weights, bias, self.stride, self.padding)


def conv_layer(weights: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> LayerParams:
    return LayerParams(CONV, np.asarray(weights, np.float64), np.asarray(bias, np.float64), stride, padding)


def transposed_conv_layer(
    weights: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0
) -> LayerParams:
    return LayerParams(
        TRANSPOSED_CONV, np.asarray(weights, np.float64), np.asarray(bias, np.float64), stride, padding
    )


def activation_layer() -> LayerParams:
    return LayerParams(ACTIVATION)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def transposed_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


# -- shared im2col / col2im primitives ---------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Return patches shaped ``(..., Ho, Wo, k, k, C)`` (a copy)."""
    if padding:
        pad = [(0, 0)] * (x.ndim - 3) + [(padding, padding), (padding, padding), (0, 0)]
        x = np.pad(x, pad)
    *lead, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    st = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(*lead, ho, wo, k, k, c),
        strides=(*st[:-3], st[-3] * stride, st[-2] * stride, st[-3], st[-2], st[-1]),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def _col2im(cols: np.ndarray, out_h: int, out_w: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add ``(..., h, w, k, k, C)`` patches."""
    *lead, h, w, k, _, c = cols.shape
    full_h = max((h - 1) * stride + k, out_h + 2 * padding)
    full_w = max((w - 1) * stride + k, out_w + 2 * padding)
    buf = np.zeros((*lead, full_h, full_w, c))
    for a in range(k):
        for b in range(k):
            buf[..., a : a + stride * h : stride, b : b + stride * w : stride, :] += cols[..., a, b, :]
    return buf[..., padding : padding + out_h, padding : padding + out_w, :]


def _check_input(x: np.ndarray, params: LayerParams) -> None:
    if x.ndim < 3:
        raise DimensionError(f"input must be (..., H, W, C), got shape {x.shape}")
    if x.shape[-1] != params.in_channels:
        raise DimensionError(
            f"input shape {x.shape} has {x.shape[-1]} channels, "
            f"weights {params.weights.shape} expect {params.in_channels}"
        )


# -- strided convolution -----------------------------------------------------


def conv2d_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Strided, zero-padded cross-correlation."""
    _check_input(x, params)
    k, s, p = params.kernel, params.stride, params.padding
    if x.shape[-3] + 2 * p < k or x.shape[-2] + 2 * p < k:
        raise DimensionError(f"input shape {x.shape} smaller than kernel {params.weights.shape}")
    cols = _im2col(x, k, s, p)
    out = cols.reshape(*cols.shape[:-3], -1) @ params.weights.reshape(-1, params.out_channels)
    return out + params.bias


def conv2d_backward(
    x: np.ndarray, params: LayerParams, upstream: np.ndarray
) -> tuple[np.ndarray, LayerParams]:
    """Gradients of ``sum(upstream * conv2d_forward(x))`` w.r.t. input and parameters."""
    _check_input(x, params)
    k, s, p = params.kernel, params.stride, params.padding
    ho = conv_output_size(x.shape[-3], k, s, p)
    wo = conv_output_size(x.shape[-2], k, s, p)
    expected = (*x.shape[:-3], ho, wo, params.out_channels)
    if upstream.shape != expected:
        raise DimensionError(f"upstream gradient {upstream.shape} != forward output {expected}")
    cols = _im2col(x, k, s, p)
    g2 = upstream.reshape(-1, params.out_channels)
    w2 = params.weights.reshape(-1, params.out_channels)
    grad_w = (cols.reshape(g2.shape[0], -1).T @ g2).reshape(params.weights.shape)
    grad_b = g2.sum(axis=0)
    gcols = (upstream @ w2.T).reshape(*upstream.shape[:-1], k, k, params.in_channels)
    grad_x = _col2im(gcols, x.shape[-3], x.shape[-2], s, p)
    return grad_x, params.replace(grad_w, grad_b)


# -- transposed convolution --------------------------------------------------


def transposed_conv2d_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Fractionally strided convolution; output side ``(h - 1) * s - 2p + k``."""
    _check_input(x, params)
    k, s, p = params.kernel, params.stride, params.padding
    ho = transposed_output_size(x.shape[-3], k, s, p)
    wo = transposed_output_size(x.shape[-2], k, s, p)
    if ho < 1 or wo < 1:
        raise DimensionError(f"input shape {x.shape} too small for weights {params.weights.shape}")
    cols = (x @ params.weights.transpose(2, 0, 1, 3).reshape(params.in_channels, -1)).reshape(
        *x.shape[:-1], k, k, params.out_channels
    )
    return _col2im(cols, ho, wo, s, p) + params.bias


def transposed_conv2d_backward(
    x: np.ndarray, params: LayerParams, upstream: np.ndarray
) -> tuple[np.ndarray, LayerParams]:
    _check_input(x, params)
    k, s, p = params.kernel, params.stride, params.padding
    ho = transposed_output_size(x.shape[-3], k, s, p)
    wo = transposed_output_size(x.shape[-2], k, s, p)
    expected = (*x.shape[:-3], ho, wo, params.out_channels)
    if upstream.shape != expected:
        raise DimensionError(f"upstream gradient {upstream.shape} != forward output {expected}")
    # Patches of the upstream gradient line up one-to-one with input sites.
    gcols = _im2col(upstream, k, s, p)[..., : x.shape[-3], : x.shape[-2], :, :, :]
    gflat = gcols.reshape(-1, k * k * params.out_channels)
    xflat = x.reshape(-1, params.in_channels)
    grad_w = (xflat.T @ gflat).reshape(params.in_channels, k, k, params.out_channels)
    grad_w = grad_w.transpose(1, 2, 0, 3)
    grad_b = upstream.reshape(-1, params.out_channels).sum(axis=0)
    w2 = params.weights.transpose(0, 1, 3, 2).reshape(-1, params.in_channels)
    grad_x = (gflat @ w2).reshape(x.shape)
    return grad_x, params.replace(np.ascontiguousarray(grad_w), grad_b)


# -- activation --------------------------------------------------------------


def activation_forward(x: np.ndarray, kind: str = "leaky_relu") -> np.ndarray:
    if kind != "leaky_relu":
        raise ValueError(f"unsupported activation {kind!r}")
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def activation_backward(x: np.ndarray, upstream: np.ndarray, kind: str = "leaky_relu") -> np.ndarray:
    if kind != "leaky_relu":
        raise ValueError(f"unsupported activation {kind!r}")
    if upstream.shape != x.shape:
        raise DimensionError(f"upstream gradient {upstream.shape} != input {x.shape}")
    return np.where(x > 0, upstream, LEAKY_SLOPE * upstream)


def layer_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    if params.kind == CONV:
        return conv2d_forward(x, params)
    if params.kind == TRANSPOSED_CONV:
        return transposed_conv2d_forward(x, params)
    if params.kind == ACTIVATION:
        return activation_forward(x)
    raise ValueError(f"layer kind {params.kind!r} has no forward map")


def layer_backward(x: np.ndarray, params: LayerParams, upstream: np.ndarray):
    if params.kind == CONV:
        return conv2d_backward(x, params, upstream)
    if params.kind == TRANSPOSED_CONV:
        return transposed_conv2d_backward(x, params, upstream)
    if params.kind == ACTIVATION:
        return activation_backward(x, upstream), params
    raise ValueError(f"layer kind {params.kind!r} has no backward map")


def sequential_forward(x: np.ndarray, layers: list[LayerParams]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run a layer stack, returning the output and the input of every layer."""
    inputs = []
    for layer in layers:
        inputs.append(x)
        x = layer_forward(x, layer)
    return x, inputs


def sequential_backward(
    inputs: list[np.ndarray],
    layers: list[LayerParams],
    upstream: np.ndarray,
    need_params: bool = True,
    need_input: bool = True,
) -> tuple[np.ndarray | None, list[LayerParams]]:
    """Chain per-layer backward maps in reverse order.

    With ``need_params=False`` only the input gradient is computed; the
    returned parameter-gradient list is then empty.  With
    ``need_input=False`` the first layer's input gradient is skipped and
    ``None`` is returned in its place.
    """
    grads: list[LayerParams] = []
    g = upstream
    for i, (x, layer) in enumerate(zip(reversed(inputs), reversed(layers))):
        if not need_input and i == len(layers) - 1 and layer.kind != ACTIVATION:
            if need_params:
                grads.append(_param_grad_only(x, layer, g))
            g = None
        elif layer.kind == ACTIVATION:
            g = activation_backward(x, g)
            if need_params:
                grads.append(layer)
        elif need_params:
            g, gp = layer_backward(x, layer, g)
            grads.append(gp)
        else:
            g = _input_grad_only(x, layer, g)
    grads.reverse()
    return g, grads


def _param_grad_only(x: np.ndarray, layer: LayerParams, g: np.ndarray) -> LayerParams:
    k, s, p = layer.kernel, layer.stride, layer.padding
    g2 = g.reshape(-1, layer.out_channels)
    if layer.kind == CONV:
        cols = _im2col(x, k, s, p).reshape(g2.shape[0], -1)
        grad_w = (cols.T @ g2).reshape(layer.weights.shape)
    else:
        gcols = _im2col(g, k, s, p)[..., : x.shape[-3], : x.shape[-2], :, :, :]
        xflat = x.reshape(-1, layer.in_channels)
        grad_w = (xflat.T @ gcols.reshape(xflat.shape[0], -1)).reshape(layer.in_channels, k, k, -1)
        grad_w = np.ascontiguousarray(grad_w.transpose(1, 2, 0, 3))
    return layer.replace(grad_w, g2.sum(axis=0))


def _input_grad_only(x: np.ndarray, layer: LayerParams, g: np.ndarray) -> np.ndarray:
    k, s, p = layer.kernel, layer.stride, layer.padding
    if layer.kind == CONV:
        w2 = layer.weights.reshape(-1, layer.out_channels)
        gcols = (g @ w2.T).reshape(*g.shape[:-1], k, k, layer.in_channels)
        return _col2im(gcols, x.shape[-3], x.shape[-2], s, p)
    gcols = _im2col(g, k, s, p)[..., : x.shape[-3], : x.shape[-2], :, :, :]
    w2 = layer.weights.transpose(0, 1, 3, 2).reshape(-1, layer.in_channels)
    return gcols.reshape(*x.shape[:-1], -1) @ w2


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh parameter and state objects."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: gradient {g.shape} != parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {name!r}")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        if name not in grads:
            new_params[name] = p
            continue
        g = grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# -- checkpoint I/O ----------------------------------------------------------


def _write_array(fh: BinaryIO, a: np.ndarray) -> None:
    fh.write(struct.pack("<B", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_array(fh: BinaryIO) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def save_layers(layers: list[LayerParams], fh: BinaryIO) -> None:
    """Write layers in the ``GSC1`` little-endian checkpoint layout."""
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", len(layers)))
    for layer in layers:
        fh.write(struct.pack("<BBB", _KIND_CODES[layer.kind], layer.stride, layer.padding))
        _write_array(fh, layer.weights)
        _write_array(fh, layer.bias)


def load_layers(fh: BinaryIO) -> list[LayerParams]:
    if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    layers = []
    for _ in range(count):
        code, stride, padding = struct.unpack("<BBB", _read_exact(fh, 3))
        if code not in _KIND_NAMES:
            raise CheckpointError(f"unknown layer kind code {code}")
        weights = _read_array(fh)
        bias = _read_array(fh)
        layers.append(LayerParams(_KIND_NAMES[code], weights, bias, stride, padding))
    return layers


def layers_to_bytes(layers: list[LayerParams]) -> bytes:
    buf = io.BytesIO()
    save_layers(layers, buf)
    return buf.getvalue()


def layers_from_bytes(data: bytes) -> list[LayerParams]:
    return load_layers(io.BytesIO(data))
