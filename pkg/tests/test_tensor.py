import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import RTOL, numeric_grad, rel_error, smooth_functional
from nilmfed.tensor import (
    Adam,
    AdamState,
    DivergenceError,
    FilterBank,
    adam_update,
    conv1d_backward,
    conv1d_forward,
    conv_output_width,
    dense_backward,
    dense_forward,
    mse_loss,
    relu,
    relu_backward,
)


def bank(w, b=None):
    w = np.asarray(w, dtype=float)
    return FilterBank(w, np.zeros(w.shape[0]) if b is None else b)


class TestConvForward:
    def test_long_window_width(self):
        assert conv_output_width(499, 10, 1) == 490

    def test_identity_kernel(self):
        y = conv1d_forward(np.array([[1.0, 2.0, 3.0]]), bank([[[1.0]]]))
        np.testing.assert_array_equal(y, [[1.0, 2.0, 3.0]])

    def test_hand_evaluated(self):
        y = conv1d_forward(np.array([[1.0, 2.0, 3.0, 4.0]]), bank([[[1.0, 0.0, -1.0]]]))
        np.testing.assert_array_equal(y, [[-2.0, -2.0]])

    def test_bias_and_channels(self):
        x = np.arange(10.0).reshape(2, 5)
        f = FilterBank(np.ones((3, 2, 2)), np.array([0.0, 1.0, -1.0]))
        y = conv1d_forward(x, f)
        assert y.shape == (3, 4)
        # window sum over both channels
        expected = np.array([x[:, j : j + 2].sum() for j in range(4)])
        np.testing.assert_allclose(y[1], expected + 1.0)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3, 12))
        f = FilterBank(rng.normal(size=(5, 3, 4)), rng.normal(size=5))
        yb = conv1d_forward(x, f)
        for i in range(4):
            np.testing.assert_allclose(yb[i], conv1d_forward(x[i], f), rtol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            conv1d_forward(np.zeros((2, 5)), bank(np.zeros((1, 1, 2))))

    def test_too_short(self):
        with pytest.raises(ValueError, match="shorter"):
            conv1d_forward(np.zeros((1, 2)), bank(np.zeros((1, 1, 3))))

    def test_stride_other_than_one_rejected(self):
        f = FilterBank(np.ones((1, 1, 2)), np.zeros(1), stride=2)
        with pytest.raises(ValueError, match="stride"):
            conv1d_forward(np.zeros((1, 5)), f)

    @given(w=st.integers(1, 60), k=st.integers(1, 60))
    def test_width_law(self, w, k):
        if k > w:
            return
        y = conv1d_forward(np.zeros((1, w)), bank(np.zeros((2, 1, k))))
        assert y.shape[-1] == w - k + 1 == conv_output_width(w, k, 1)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 3, 40))
        f = FilterBank(rng.normal(size=(6, 3, 5)), rng.normal(size=6))
        assert conv1d_forward(x, f).tobytes() == conv1d_forward(x, f).tobytes()


class TestConvBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 7))
        f = FilterBank(rng.normal(size=(3, 2, 3)), rng.normal(size=3))
        gx, gw, gb = conv1d_backward(x, f, np.zeros((3, 5)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_kernel_passes_gradient(self):
        g = np.array([[0.5, -1.0, 2.0]])
        gx, _, _ = conv1d_backward(np.ones((1, 3)), bank([[[1.0]]]), g)
        np.testing.assert_array_equal(gx, g)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="grad_out"):
            conv1d_backward(np.zeros((1, 5)), bank(np.zeros((1, 1, 2))), np.zeros((1, 3)))

    @pytest.mark.parametrize("seed", range(6))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        c_in = int(rng.integers(1, 3))
        c_out = int(rng.integers(1, 3))
        width = int(rng.integers(3, 7))
        k = int(rng.integers(1, width + 1))
        x = rng.normal(size=(c_in, width))
        w = rng.normal(size=(c_out, c_in, k))
        b = rng.normal(size=c_out)
        value, grad = smooth_functional(rng, (c_out, width - k + 1))

        y = conv1d_forward(x, FilterBank(w, b))
        gx, gw, gb = conv1d_backward(x, FilterBank(w, b), grad(y))

        assert rel_error(gx, numeric_grad(lambda xx: value(conv1d_forward(xx, FilterBank(w, b))), x)) < RTOL
        assert rel_error(gw, numeric_grad(lambda ww: value(conv1d_forward(x, FilterBank(ww, b))), w)) < RTOL
        assert rel_error(gb, numeric_grad(lambda bb: value(conv1d_forward(x, FilterBank(w, bb))), b)) < RTOL


class TestDense:
    def test_identity(self):
        x = np.array([3.0, -1.0, 2.0])
        np.testing.assert_array_equal(dense_forward(x, np.eye(3), np.zeros(3)), x)

    def test_hand_value(self):
        np.testing.assert_array_equal(dense_forward([1.0, 2.0], [[1.0, 1.0]], [1.0]), [4.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            dense_forward(np.ones(3), np.ones((2, 2)), np.zeros(2))

    @pytest.mark.parametrize("seed", range(4))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(10 + seed)
        x = rng.normal(size=(3, 4))
        W = rng.normal(size=(2, 4))
        b = rng.normal(size=2)
        value, grad = smooth_functional(rng, (3, 2))
        gx, gW, gb = dense_backward(x, W, grad(dense_forward(x, W, b)))
        assert rel_error(gx, numeric_grad(lambda v: value(dense_forward(v, W, b)), x)) < RTOL
        assert rel_error(gW, numeric_grad(lambda v: value(dense_forward(x, v, b)), W)) < RTOL
        assert rel_error(gb, numeric_grad(lambda v: value(dense_forward(x, W, v)), b)) < RTOL


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_positive_identity(self):
        x = np.array([0.1, 5.0, 3.0])
        np.testing.assert_array_equal(relu(x), x)
        np.testing.assert_array_equal(relu_backward(x, np.ones(3)), np.ones(3))

    def test_subgradient_at_zero(self):
        np.testing.assert_array_equal(relu_backward(np.array([0.0]), np.array([7.0])), [0.0])

    def test_composed_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6))
        f1 = FilterBank(rng.normal(size=(2, 2, 3)), rng.normal(size=2))
        W = rng.normal(size=(3, 8))
        b = rng.normal(size=3)
        value, grad = smooth_functional(rng, (3,))

        def net(xx):
            h = relu(conv1d_forward(xx, f1))
            return dense_forward(h.ravel(), W, b)

        z = conv1d_forward(x, f1)
        h = relu(z)
        gh, _, _ = dense_backward(h.ravel(), W, grad(net(x)))
        gz = relu_backward(z, gh.reshape(h.shape))
        gx, _, _ = conv1d_backward(x, f1, gz)
        assert rel_error(gx, numeric_grad(lambda v: value(net(v)), x)) < RTOL


class TestMSE:
    def test_zero(self):
        assert mse_loss([1.0, 2.0], [1.0, 2.0])[0] == 0.0

    def test_value(self):
        assert mse_loss([0.0], [2.0])[0] == 4.0

    def test_gradient(self):
        rng = np.random.default_rng(4)
        pred, target = rng.normal(size=5), rng.normal(size=5)
        _, g = mse_loss(pred, target)
        np.testing.assert_allclose(g, 2 * (pred - target) / 5)
        assert rel_error(g, numeric_grad(lambda p: mse_loss(p, target)[0], pred)) < RTOL


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, -2.0])]
        new, _ = adam_update(p, [np.zeros(2)])
        np.testing.assert_array_equal(new[0], p[0])

    def test_first_step_closed_form(self):
        lr = 1e-4
        new, state = adam_update([np.array([0.5])], [np.array([1.0])], learning_rate=lr)
        assert abs((new[0][0] - 0.5) - (-lr)) < 1e-9
        assert state.step == 1

    def test_pure(self):
        p = [np.array([1.0])]
        st0 = AdamState.zeros_like(p)
        adam_update(p, [np.array([3.0])], st0)
        assert p[0][0] == 1.0 and st0.step == 0 and st0.m[0][0] == 0.0

    @pytest.mark.parametrize("g", [2.0, -0.3])
    def test_constant_gradient_moves_against_sign(self, g):
        opt = Adam(learning_rate=1e-2)
        p = [np.array([0.0])]
        trace = [0.0]
        for _ in range(50):
            opt.step(p, [np.array([g])])
            trace.append(p[0][0])
        steps = np.diff(trace)
        assert np.all(np.sign(steps) == -np.sign(g))

    def test_non_finite_rejected(self):
        p = [np.array([1.0])]
        with pytest.raises(DivergenceError):
            adam_update(p, [np.array([np.nan])])
        opt = Adam()
        with pytest.raises(DivergenceError):
            opt.step(p, [np.array([np.inf])])
        assert p[0][0] == 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_conv_gradient_property(seed):
    rng = np.random.default_rng(seed)
    width = int(rng.integers(2, 7))
    k = int(rng.integers(1, width + 1))
    x = rng.normal(size=(2, width))
    f = FilterBank(rng.normal(size=(2, 2, k)), rng.normal(size=2))
    value, grad = smooth_functional(rng, (2, width - k + 1))
    _, gw, _ = conv1d_backward(x, f, grad(conv1d_forward(x, f)))
    num = numeric_grad(lambda ww: value(conv1d_forward(x, FilterBank(ww, f.bias))), f.weights)
    assert rel_error(gw, num) < RTOL
