from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import RTOL, numeric_grad, rel_error
from oracles import FILTERS, KERNELS, count_oracle
from nilmfed.data import Normalizer, NormStats, WindowBatch
from nilmfed.model import (
    ArchSpec,
    TrainConfig,
    TrainingDiverged,
    arch_param_count,
    backward,
    build_seq2point,
    conv_layer_ops,
    forward,
    forward_cached,
    init_params,
    layer_op_counts,
    live_channels,
    load_params,
    multitask_mse,
    op_count,
    param_count,
    params_from_bytes,
    save_params,
    train,
)

SMALL = ((3, 3), (4, 2))


def batch(windows, targets):
    n_tasks = targets.shape[1]
    norm = Normalizer(NormStats(0.0, 1.0), tuple(NormStats(0.0, 1.0) for _ in range(n_tasks)))
    return WindowBatch(windows, targets, norm)


class TestArchitecture:
    def test_oracle_values(self):
        widths, flat, total = count_oracle(99)
        assert widths == [90, 83, 78, 74, 70]
        assert flat == 3500
        assert total == 3_623_449

    def test_widths(self):
        arch = ArchSpec(99)
        assert arch.conv_widths == (90, 83, 78, 74, 70)
        assert arch.flatten_size == 3500

    def test_param_count(self):
        p = build_seq2point(99, 1)
        assert param_count(p) == arch_param_count(p.arch) == count_oracle(99)[2] == 3_623_449

    @pytest.mark.parametrize("w", [99, 499, 40])
    def test_param_count_matches_oracle(self, w):
        assert arch_param_count(ArchSpec(w, n_tasks=3)) == count_oracle(w, tasks=3)[2]

    def test_mtl_adds_only_heads(self):
        single = param_count(build_seq2point(99, 1))
        multi = param_count(build_seq2point(99, 4))
        assert multi - single == 3 * (1024 + 1)

    def test_mtl_sharing_ratio(self):
        ratio = param_count(build_seq2point(99, 4)) / (4 * param_count(build_seq2point(99, 1)))
        assert 0.24 < ratio < 0.26

    def test_window_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            build_seq2point(20)

    def test_n_tasks_positive(self):
        with pytest.raises(ValueError):
            ArchSpec(99, n_tasks=0)

    def test_freeze_mask_length(self):
        p = build_seq2point(99)
        assert len(p.freeze_mask) == 7
        with pytest.raises(ValueError):
            p.with_freeze([True] * 6)


class TestOpCount:
    def test_formula(self):
        assert conv_layer_ops(30, 40, 6, 78) == 561_600

    def test_default_layer_three(self):
        assert layer_op_counts(ArchSpec(99))[2] == 561_600

    def test_empty_model(self):
        assert op_count(ArchSpec(10, conv_layers=())) == 0

    @pytest.mark.parametrize("m", [1, 10, 39])
    def test_prune_fraction(self, m):
        before = conv_layer_ops(30, 40, 6, 78)
        after = conv_layer_ops(30, 40 - m, 6, 78)
        assert Fraction(before - after, before) == Fraction(m, 40)


class TestForward:
    def test_zero_params_predict_zero(self):
        p = init_params(ArchSpec(99, n_tasks=2), layers=())
        x = np.random.default_rng(0).normal(size=(5, 99))
        np.testing.assert_array_equal(forward(p, x), np.zeros((5, 2)))

    def test_shape(self):
        p = build_seq2point(99, 4)
        assert forward(p, np.zeros((3, 99))).shape == (3, 4)

    def test_deterministic(self):
        p = build_seq2point(99, 2, seed=5)
        x = np.random.default_rng(1).normal(size=(7, 99))
        assert forward(p, x).tobytes() == forward(p, x).tobytes()

    def test_window_mismatch(self):
        with pytest.raises(ValueError, match="windows"):
            forward(build_seq2point(99), np.zeros((2, 98)))

    def test_seeded_init(self):
        a, b = build_seq2point(99, seed=3), build_seq2point(99, seed=3)
        assert a.to_bytes() == b.to_bytes()
        assert build_seq2point(99, seed=4).to_bytes() != a.to_bytes()

    def test_live_channels(self):
        p = init_params(ArchSpec(20, SMALL, dense_width=3, n_tasks=1), seed=2)
        assert [list(c) for c in live_channels(p)] == [[0, 1, 2], [0, 1, 2, 3]]
        p.conv[1].weights[:, 1, :] = 0.0
        w = p.arch.conv_widths[-1]
        p.dense_w[:, 2 * w : 3 * w] = 0.0
        assert [list(c) for c in live_channels(p)] == [[0, 2], [0, 1, 3]]

    def test_dead_channels_do_not_change_output(self):
        p = init_params(ArchSpec(20, SMALL, dense_width=3, n_tasks=2), seed=3)
        p.conv[1].weights[:, 0, :] = 0.0
        p.conv[0].bias[0] = 5.0  # live activation, but nothing reads it
        x = np.random.default_rng(3).normal(size=(6, 20))
        full = forward_cached(p, x)[0]
        np.testing.assert_allclose(forward(p, x), full, rtol=1e-12, atol=1e-12)


class TestBackward:
    def small(self, seed=0):
        return init_params(ArchSpec(8, SMALL, dense_width=5, n_tasks=2), seed=seed)

    @pytest.mark.parametrize("seed", range(3))
    def test_network_gradients(self, seed):
        p = self.small(seed)
        rng = np.random.default_rng(seed)
        for i in range(p.arch.n_layers):
            for arr in p.layer_arrays(i):
                arr += rng.normal(scale=0.1, size=arr.shape)
        x = rng.normal(size=(4, 8))
        y = rng.normal(size=(4, 2))

        def loss_of(arrays):
            return multitask_mse(forward(p.with_arrays(arrays), x), y)[0]

        pred, cache = forward_cached(p, x)
        _, g = multitask_mse(pred, y)
        grads = backward(p, cache, g)
        arrays = p.arrays()
        for layer in range(p.arch.n_layers):
            for j, analytic in enumerate(grads[layer]):
                pos = 2 * layer + j

                def f(v, pos=pos):
                    arrs = [a.copy() for a in arrays]
                    arrs[pos] = v
                    return loss_of(arrs)

                assert rel_error(analytic, numeric_grad(f, arrays[pos])) < RTOL, (layer, j)

    def test_hidden_gradient_injection(self):
        p = self.small(7)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 8))
        r = rng.normal(size=(5, 5))
        # objective on the hidden layer only: sum(r * h)
        pred, cache = forward_cached(p, x)
        grads = backward(p, cache, np.zeros_like(pred), grad_hidden=r)

        def f(w):
            q = p.copy()
            q.dense_w[...] = w
            return float(np.sum(r * forward_cached(q, x)[1].hidden))

        a = p.arch
        assert rel_error(grads[a.dense_index][0], numeric_grad(f, p.dense_w)) < RTOL
        assert not grads[a.head_index][0].any()

    def test_start_from_cached_prefix(self):
        from nilmfed.model import prefix_features

        p = self.small(2)
        x = np.random.default_rng(2).normal(size=(6, 8))
        full, _ = forward_cached(p, x)
        for start in range(p.arch.n_layers):
            part, _ = forward_cached(p, prefix_features(p, x, start), start)
            np.testing.assert_allclose(part, full, rtol=1e-12, atol=1e-12)


class TestTrain:
    def data(self, n=32, seed=0, tasks=1):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 99))
        # learnable target: windowed midpoint energy
        y = np.stack([x[:, 45:55].mean(axis=1) * (t + 1) for t in range(tasks)], axis=1)
        return batch(x, y)

    def test_zero_learning_rate(self):
        p = build_seq2point(99, seed=1)
        out, hist = train(p, self.data(), TrainConfig(epochs=2, learning_rate=0.0))
        assert out.to_bytes() == p.to_bytes()
        assert len(hist) == 2

    def test_alignment_weight_needs_target_data(self):
        with pytest.raises(ValueError, match="personalize"):
            train(build_seq2point(99, seed=1), self.data(), TrainConfig(epochs=1, coral_lambda=1.0))

    def test_fully_frozen(self):
        p = build_seq2point(99, seed=1).with_freeze([True] * 7)
        out, _ = train(p, self.data(), TrainConfig(epochs=2, learning_rate=1e-2))
        assert out.to_bytes() == p.to_bytes()

    def test_input_not_mutated(self):
        p = build_seq2point(99, seed=1)
        before = p.to_bytes()
        train(p, self.data(), TrainConfig(epochs=1, learning_rate=1e-3))
        assert p.to_bytes() == before

    def test_overfit_small_set(self):
        data = self.data(32, seed=3)
        p = build_seq2point(99, seed=2)
        initial = multitask_mse(forward(p, data.windows), data.targets)[0]
        out, hist = train(p, data, TrainConfig(epochs=200, batch_size=32, learning_rate=1e-4))
        final = multitask_mse(forward(out, data.windows), data.targets)[0]
        assert final < 0.01 * initial

    def test_loss_nonincreasing_small_lr(self):
        arch = ArchSpec(16, SMALL, dense_width=8, n_tasks=2)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(20, 16))
        y = np.stack([x[:, 6:10].sum(1), x[:, 8]], axis=1)
        _, hist = train(init_params(arch, 4), batch(x, y), TrainConfig(epochs=60, batch_size=20, learning_rate=1e-4))
        rises = sum(b > a + 1e-6 for a, b in zip(hist, hist[1:]))
        assert rises < 0.05 * len(hist)

    def test_multitask_loss_is_sum(self):
        pred = np.array([[1.0, 0.0], [0.0, 2.0]])
        target = np.zeros((2, 2))
        loss, _ = multitask_mse(pred, target)
        assert loss == pytest.approx(0.5 + 2.0)

    def test_missing_task_targets(self):
        data = self.data(tasks=1)
        with pytest.raises(ValueError, match="targets"):
            train(build_seq2point(99, 2), data, TrainConfig(epochs=1))

    def test_divergence_returns_last_good(self):
        data = self.data(8)
        data.targets[0, 0] = 1e200
        p = build_seq2point(99, seed=0)
        with pytest.raises(TrainingDiverged) as info:
            train(p, data, TrainConfig(epochs=3, learning_rate=1e-3, batch_size=8))
        assert info.value.params.to_bytes() == p.to_bytes()

    @settings(max_examples=10, deadline=None)
    @given(mask=st.lists(st.booleans(), min_size=4, max_size=4))
    def test_frozen_layers_bit_identical(self, mask):
        arch = ArchSpec(12, SMALL, dense_width=6, n_tasks=2)
        p = init_params(arch, 1).with_freeze(mask)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 12))
        out, _ = train(p, batch(x, rng.normal(size=(10, 2))), TrainConfig(epochs=3, batch_size=4, learning_rate=1e-2))
        for i, frozen in enumerate(mask):
            same = all(a.tobytes() == b.tobytes() for a, b in zip(p.layer_arrays(i), out.layer_arrays(i)))
            assert same == frozen or not frozen


class TestSerialization:
    def test_round_trip(self, tmp_path):
        p = build_seq2point(99, 3, seed=9).with_freeze([True] * 5 + [False] * 2)
        path = tmp_path / "m.bin"
        save_params(p, path)
        q = load_params(path)
        assert q.arch == p.arch
        assert q.freeze_mask == p.freeze_mask
        assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), q.arrays()))
        assert q.to_bytes() == path.read_bytes()

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            params_from_bytes(b"not a model")
