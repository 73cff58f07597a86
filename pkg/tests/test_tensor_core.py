import io

import numpy as np
import pytest

from latentshift import tensor_core as tc

from helpers import central_diff, conv_oracle, rel_err, transposed_conv_oracle


def random_layer(rng, kind, k=3, cin=2, cout=3, stride=2, pad=1):
    w = rng.normal(size=(k, k, cin, cout))
    b = rng.normal(size=cout)
    if kind == "conv":
        return tc.conv_layer(w, b, stride, pad)
    return tc.transposed_conv_layer(w, b, stride, pad)


FORWARD = {"conv": tc.conv2d_forward, "tconv": tc.transposed_conv2d_forward}
BACKWARD = {"conv": tc.conv2d_backward, "tconv": tc.transposed_conv2d_backward}


class TestConvForward:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(5, 4, 3))
        layer = tc.conv_layer(np.eye(3).reshape(1, 1, 3, 3), np.zeros(3))
        np.testing.assert_array_equal(tc.conv2d_forward(x, layer), x)

    def test_zero_weights_give_bias(self, rng):
        x = rng.normal(size=(6, 6, 2))
        layer = tc.conv_layer(np.zeros((3, 3, 2, 4)), np.array([1.0, -2.0, 0.5, 3.0]), 2, 1)
        out = tc.conv2d_forward(x, layer)
        assert out.shape == (3, 3, 4)
        np.testing.assert_array_equal(out, np.broadcast_to([1.0, -2.0, 0.5, 3.0], out.shape))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_nested_loop(self, rng, stride, pad):
        x = rng.normal(size=(4, 4, 1))
        w = rng.normal(size=(3, 3, 1, 1))
        b = rng.normal(size=1)
        out = tc.conv2d_forward(x, tc.conv_layer(w, b, stride, pad))
        np.testing.assert_allclose(out, conv_oracle(x, w, b, stride, pad), atol=1e-12)

    def test_output_size_formula(self, rng):
        for h, k, s, p in [(7, 3, 2, 1), (8, 5, 2, 2), (9, 4, 3, 0)]:
            layer = tc.conv_layer(np.zeros((k, k, 1, 1)), np.zeros(1), s, p)
            out = tc.conv2d_forward(np.zeros((h, h, 1)), layer)
            assert out.shape[0] == (h + 2 * p - k) // s + 1

    def test_linear_in_input(self, rng):
        layer = random_layer(rng, "conv")
        no_bias = layer.replace(layer.weights, np.zeros_like(layer.bias))
        x, y = rng.normal(size=(2, 6, 6, 2))
        a, b = 1.7, -0.3
        lhs = tc.conv2d_forward(a * x + b * y, no_bias)
        rhs = a * tc.conv2d_forward(x, no_bias) + b * tc.conv2d_forward(y, no_bias)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_channel_mismatch_reports_shapes(self, rng):
        layer = random_layer(rng, "conv", cin=2)
        with pytest.raises(tc.DimensionError, match=r"\(4, 4, 3\)"):
            tc.conv2d_forward(np.zeros((4, 4, 3)), layer)

    def test_batched_equals_loop(self, rng):
        layer = random_layer(rng, "conv")
        xs = rng.normal(size=(3, 6, 6, 2))
        batched = tc.conv2d_forward(xs, layer)
        for i in range(3):
            np.testing.assert_allclose(batched[i], tc.conv2d_forward(xs[i], layer), atol=1e-13)


class TestTransposedForward:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(3, 5, 2))
        layer = tc.transposed_conv_layer(np.eye(2).reshape(1, 1, 2, 2), np.zeros(2))
        np.testing.assert_array_equal(tc.transposed_conv2d_forward(x, layer), x)

    def test_zero_weights_give_bias(self):
        layer = tc.transposed_conv_layer(np.zeros((4, 4, 2, 3)), np.array([0.1, 0.2, 0.3]), 2, 1)
        out = tc.transposed_conv2d_forward(np.ones((3, 3, 2)), layer)
        assert out.shape == (6, 6, 3)
        np.testing.assert_array_equal(out, np.broadcast_to([0.1, 0.2, 0.3], out.shape))

    @pytest.mark.parametrize("k,stride,pad", [(4, 2, 1), (3, 1, 1), (3, 2, 0), (5, 2, 2)])
    def test_matches_scatter_oracle(self, rng, k, stride, pad):
        x = rng.normal(size=(3, 4, 2))
        w = rng.normal(size=(k, k, 2, 3))
        b = rng.normal(size=3)
        out = tc.transposed_conv2d_forward(x, tc.transposed_conv_layer(w, b, stride, pad))
        np.testing.assert_allclose(out, transposed_conv_oracle(x, w, b, stride, pad), atol=1e-12)
        assert out.shape[0] == (3 - 1) * stride - 2 * pad + k

    def test_adjoint_of_conv(self, rng):
        # <conv(x), g> == <x, tconv(g)> with shared weights and no bias.
        w = rng.normal(size=(4, 4, 2, 3))
        conv = tc.conv_layer(w, np.zeros(3), 2, 1)
        tconv = tc.transposed_conv_layer(w.transpose(0, 1, 3, 2), np.zeros(2), 2, 1)
        x = rng.normal(size=(8, 8, 2))
        g = rng.normal(size=(4, 4, 3))
        lhs = np.sum(tc.conv2d_forward(x, conv) * g)
        rhs = np.sum(x * tc.transposed_conv2d_forward(g, tconv))
        assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("kind", ["conv", "tconv"])
class TestBackward:
    def _setup(self, rng, kind):
        if kind == "conv":
            return random_layer(rng, kind, k=3), rng.normal(size=(5, 5, 2))
        return random_layer(rng, kind, k=4), rng.normal(size=(3, 3, 2))

    def test_zero_upstream(self, rng, kind):
        layer, x = self._setup(rng, kind)
        out = FORWARD[kind](x, layer)
        gx, gp = BACKWARD[kind](x, layer, np.zeros_like(out))
        assert not gx.any() and not gp.weights.any() and not gp.bias.any()

    def test_identity_layer(self, rng, kind):
        eye = np.eye(2).reshape(1, 1, 2, 2)
        make = tc.conv_layer if kind == "conv" else tc.transposed_conv_layer
        layer = make(eye, np.zeros(2))
        x = rng.normal(size=(4, 4, 2))
        up = rng.normal(size=(4, 4, 2))
        gx, _ = BACKWARD[kind](x, layer, up)
        np.testing.assert_array_equal(gx, up)

    def test_finite_differences(self, rng, kind):
        layer, x = self._setup(rng, kind)
        up = rng.normal(size=FORWARD[kind](x, layer).shape)
        gx, gp = BACKWARD[kind](x, layer, up)
        f = FORWARD[kind]
        num_x = central_diff(lambda v: np.sum(f(v, layer) * up), x)
        num_w = central_diff(lambda w: np.sum(f(x, layer.replace(w, layer.bias)) * up), layer.weights)
        num_b = central_diff(lambda b: np.sum(f(x, layer.replace(layer.weights, b)) * up), layer.bias)
        assert rel_err(gx, num_x) < 1e-6
        assert rel_err(gp.weights, num_w) < 1e-6
        assert rel_err(gp.bias, num_b) < 1e-6

    def test_linear_in_upstream(self, rng, kind):
        layer, x = self._setup(rng, kind)
        shape = FORWARD[kind](x, layer).shape
        u, v = rng.normal(size=(2, *shape))
        gu, pu = BACKWARD[kind](x, layer, u)
        gv, pv = BACKWARD[kind](x, layer, v)
        gs, ps = BACKWARD[kind](x, layer, 2 * u - 3 * v)
        np.testing.assert_allclose(gs, 2 * gu - 3 * gv, atol=1e-10)
        np.testing.assert_allclose(ps.weights, 2 * pu.weights - 3 * pv.weights, atol=1e-10)

    def test_shape_mismatch(self, rng, kind):
        layer, x = self._setup(rng, kind)
        with pytest.raises(tc.DimensionError):
            BACKWARD[kind](x, layer, np.zeros((1, 1, 3)))


class TestActivation:
    def test_negative_slope(self):
        assert tc.activation_forward(np.array([-1.0]))[0] == pytest.approx(-0.01)

    def test_zero_fixed_point(self):
        assert not tc.activation_forward(np.zeros((3, 3, 2))).any()

    def test_finite_differences(self, rng):
        x = rng.normal(size=(4, 4, 3))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        up = rng.normal(size=x.shape)
        g = tc.activation_backward(x, up)
        num = central_diff(lambda v: np.sum(tc.activation_forward(v) * up), x)
        assert rel_err(g, num) < 1e-6


def test_randomised_gradient_trials(rng):
    """Fifty random small layers of every kind agree with central differences."""
    worst = 0.0
    for trial in range(50):
        kind = ("conv", "tconv")[trial % 2]
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k))
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        layer = random_layer(rng, kind, k, cin, cout, stride, pad)
        hw = int(rng.integers(max(k, 2), 6))
        x = rng.normal(size=(hw, hw, cin))
        try:
            out = FORWARD[kind](x, layer)
        except tc.DimensionError:
            continue
        up = rng.normal(size=out.shape)
        gx, gp = BACKWARD[kind](x, layer, up)
        f = FORWARD[kind]
        worst = max(worst, rel_err(gx, central_diff(lambda v: np.sum(f(v, layer) * up), x)))
        worst = max(
            worst,
            rel_err(gp.weights, central_diff(lambda w: np.sum(f(x, layer.replace(w, layer.bias)) * up), layer.weights)),
        )
    assert worst < 1e-4


def test_sequential_chain(rng):
    layers = [
        random_layer(rng, "conv", k=3, cin=2, cout=3),
        tc.activation_layer(),
        random_layer(rng, "tconv", k=4, cin=3, cout=2),
    ]
    x = rng.normal(size=(6, 6, 2))
    out, inputs = tc.sequential_forward(x, layers)
    up = rng.normal(size=out.shape)
    gx, grads = tc.sequential_backward(inputs, layers, up)
    num = central_diff(lambda v: np.sum(tc.sequential_forward(v, layers)[0] * up), x)
    assert rel_err(gx, num) < 1e-6
    only_input, none = tc.sequential_backward(inputs, layers, up, need_params=False)
    np.testing.assert_allclose(only_input, gx, atol=1e-12)
    assert none == []
    skipped, grads2 = tc.sequential_backward(inputs, layers, up, need_input=False)
    assert skipped is None
    np.testing.assert_allclose(grads2[0].weights, grads[0].weights, atol=1e-12)


def test_deterministic(rng):
    layer = random_layer(rng, "conv")
    x = rng.normal(size=(6, 6, 2))
    a = tc.conv2d_forward(x, layer)
    b = tc.conv2d_forward(x.copy(), layer)
    assert a.tobytes() == b.tobytes()
    up = rng.normal(size=a.shape)
    assert tc.conv2d_backward(x, layer, up)[0].tobytes() == tc.conv2d_backward(x, layer, up)[0].tobytes()


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = tc.adam_step(p, {"w": np.zeros(2)}, tc.AdamState(), lr=0.1)
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1

    def test_hand_computed_scalar(self):
        # m = 0.1*g, v = 0.001*g^2, bias-corrected to g and g^2: step = lr*g/(|g|+eps).
        p = {"w": np.array([0.5])}
        g = 2.0
        new, _ = tc.adam_step(p, {"w": np.array([g])}, tc.AdamState(), lr=0.01)
        expected = 0.5 - 0.01 * (0.1 * g / 0.1) / (np.sqrt(0.001 * g * g / 0.001) + 1e-8)
        assert new["w"][0] == pytest.approx(expected, abs=1e-15)

    def test_second_step_by_hand(self):
        p = {"w": np.array([0.0])}
        new, st = tc.adam_step(p, {"w": np.array([1.0])}, tc.AdamState(), lr=0.1)
        new, st = tc.adam_step(new, {"w": np.array([-1.0])}, st, lr=0.1)
        m = 0.9 * 0.1 - 0.1
        v = 0.999 * 0.001 + 0.001
        m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999**2)
        first = -0.1 * 1.0 / (1.0 + 1e-8)
        assert new["w"][0] == pytest.approx(first - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-14)

    def test_deterministic(self, rng):
        p = {"a": rng.normal(size=3)}
        g = {"a": rng.normal(size=3)}
        s = tc.AdamState()
        assert tc.adam_step(p, g, s, 0.01)[0]["a"].tobytes() == tc.adam_step(p, g, s, 0.01)[0]["a"].tobytes()

    def test_non_finite_names_layer(self):
        with pytest.raises(tc.TrainingError, match="g_s.4.w"):
            tc.adam_step({"g_s.4.w": np.zeros(2)}, {"g_s.4.w": np.array([np.nan, 0.0])}, tc.AdamState(), 0.1)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, rng):
        layers = [random_layer(rng, "conv"), tc.activation_layer(), random_layer(rng, "tconv", k=4)]
        data = tc.layers_to_bytes(layers)
        assert data[:4] == b"GSC1"
        back = tc.layers_from_bytes(data)
        assert len(back) == 3
        for a, b in zip(layers, back):
            assert (a.kind, a.stride, a.padding) == (b.kind, b.stride, b.padding)
            assert a.weights.tobytes() == b.weights.tobytes()
            assert a.bias.tobytes() == b.bias.tobytes()
        assert tc.layers_to_bytes(back) == data

    def test_layer_count_little_endian(self, rng):
        data = tc.layers_to_bytes([tc.activation_layer()] * 3)
        assert data[4:8] == (3).to_bytes(4, "little")

    def test_bad_magic(self):
        with pytest.raises(tc.CheckpointError):
            tc.load_layers(io.BytesIO(b"XXXX\x00\x00\x00\x00"))

    def test_truncated(self, rng):
        data = tc.layers_to_bytes([random_layer(rng, "conv")])
        with pytest.raises(tc.CheckpointError):
            tc.layers_from_bytes(data[:-3])


def test_layer_params_validation():
    with pytest.raises(ValueError):
        tc.conv_layer(np.zeros((3, 3, 1, 1)), np.zeros(1), stride=0)
    with pytest.raises(tc.DimensionError):
        tc.conv_layer(np.zeros((3, 3, 1, 2)), np.zeros(3))
