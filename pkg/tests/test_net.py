import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nrse.errors import ConfigError, InputError, TrainingDiverged
from nrse.net import (SIGMOID, SOFTMAX, AdaptConfig, FrameSet, LayerSpec, NetworkSpec, Parameters,
                      TrainConfig, adapt_finetune, cnn_spec, dense, dnn_spec, evaluate, forward,
                      forward_with_taps, frame_error, init_network, loss_and_grad, parameter_shapes,
                      softmax, tfcnn_lite_spec, tfcnn_spec, train)

from helpers import finite_difference_check, tiny_dense_spec, tiny_tfcnn_spec


def frames_of(x, y):
    return FrameSet([np.asarray(x, dtype=np.float32)], [np.asarray(y)], 0, 0)


class TestSpec:
    def test_builders_validate(self):
        for spec in (dnn_spec(), cnn_spec(), tfcnn_spec(), tfcnn_lite_spec()):
            spec.validate()

    def test_tfcnn_concat_width(self):
        spec = tfcnn_spec()
        # time branch: 75 maps over (17 - 8 + 1) // 5 = 2; freq: 200 maps over (40 - 8 + 1) // 3 = 11
        assert spec.branch_output_shapes() == [(75, 2), (200, 11)]
        assert spec.head_width() == 75 * 2 + 200 * 11

    def test_lite_head(self):
        spec = tfcnn_lite_spec()
        assert spec.head_width() == 16 * 2 + 32 * 11
        assert spec.hidden_sizes() == [128] * 5 and spec.num_hidden == 5

    def test_paper_scale_constants(self):
        assert dnn_spec().hidden_sizes() == [2048] * 5
        assert cnn_spec().branches[0][0].num_filters == 200
        assert tfcnn_spec().input_dim == 17 * 40

    def test_roundtrip_dict(self):
        spec = tfcnn_lite_spec().with_input_norm([np.random.default_rng(0).random((30, 40))])
        assert NetworkSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("layers", [
        (dense(4), SIGMOID, dense(3), SOFTMAX),            # wrong class count
        (dense(4), dense(2), SOFTMAX),                     # missing nonlinearity
        (dense(4), SIGMOID, dense(2)),                     # missing softmax
        (LayerSpec("dense", units=0), SIGMOID, dense(2), SOFTMAX),
    ])
    def test_inconsistent(self, layers):
        with pytest.raises(ConfigError):
            init_network(NetworkSpec(6, 2, layers), 0)

    def test_kernel_wider_than_input(self):
        spec = tfcnn_spec(num_bands=5, context=3, kernel=8, hidden=(4,), num_classes=2)
        with pytest.raises(ConfigError):
            spec.validate()


class TestInit:
    def test_deterministic(self):
        spec = tfcnn_lite_spec()
        assert init_network(spec, 7).identical_to(init_network(spec, 7))
        assert not init_network(spec, 7).identical_to(init_network(spec, 8))

    def test_biases_zero(self):
        p = init_network(tfcnn_lite_spec(), 0)
        assert all(np.all(b == 0) for b in p.arrays[1::2])

    def test_output_layer_bound(self):
        spec = NetworkSpec(10, 5, (dense(5), SOFTMAX))
        w = init_network(spec, 3).arrays[0]
        bound = math.sqrt(6 / 15)
        assert bound == pytest.approx(0.632, abs=1e-3)
        assert np.max(np.abs(w)) <= bound
        assert np.max(np.abs(w)) > 0.8 * bound

    def test_shapes(self):
        spec = tfcnn_lite_spec()
        p = init_network(spec, 0)
        for (shape, _, _), w in zip(parameter_shapes(spec), p.arrays[::2]):
            assert w.shape == shape
        assert p.num_parameters == 125_880


class TestForward:
    def test_rows_sum_to_one(self):
        spec = tfcnn_lite_spec()
        x = np.random.default_rng(0).normal(size=(50, spec.input_dim))
        post = forward(spec, init_network(spec, 0), x)
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-6)
        assert np.all((post > 0) & (post < 1))

    def test_zero_weights_uniform(self):
        spec = NetworkSpec(3, 4, (dense(1), SIGMOID, dense(4), SOFTMAX))
        p = init_network(spec, 0, dtype=np.float64)
        for a in p.arrays:
            a[...] = 0
        np.testing.assert_allclose(forward(spec, p, np.ones((5, 3))), 0.25, atol=1e-15)

    def test_hand_built_two_two_two(self):
        spec = NetworkSpec(2, 2, (dense(2), SIGMOID, dense(2), SOFTMAX))
        w1 = np.array([[0.1, -0.2], [0.3, 0.4]])
        b1 = np.array([0.05, -0.05])
        w2 = np.array([[0.5, -0.6], [-0.7, 0.8]])
        b2 = np.array([0.01, 0.02])
        p = Parameters([w1, b1, w2, b2])
        x = np.array([[1.0, 2.0], [-0.5, 0.25]])
        post = forward(spec, p, x)
        for row, xi in zip(post, x):
            h = [1 / (1 + math.exp(-(xi[0] * w1[0, j] + xi[1] * w1[1, j] + b1[j]))) for j in range(2)]
            z = [h[0] * w2[0, k] + h[1] * w2[1, k] + b2[k] for k in range(2)]
            e = [math.exp(v) for v in z]
            assert row == pytest.approx([v / sum(e) for v in e], abs=1e-9)

    def test_input_width_checked(self):
        spec = tfcnn_lite_spec()
        with pytest.raises(InputError):
            forward(spec, init_network(spec, 0), np.zeros((3, 40)))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
    def test_rows_sum_large_inputs(self, x):
        spec = tiny_dense_spec(6, (5,), 3)
        post = forward(spec, init_network(spec, 1, dtype=np.float64), x)
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-6)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
    def test_softmax_shift_invariance(self, z, c):
        np.testing.assert_allclose(softmax(z + c), softmax(z), atol=1e-9)


class TestTaps:
    def test_taps_observation_only(self):
        spec = tfcnn_lite_spec()
        p = init_network(spec, 0)
        x = np.random.default_rng(1).normal(size=(20, spec.input_dim))
        plain = forward(spec, p, x)
        for layer in range(1, spec.num_hidden + 1):
            post, trace = forward_with_taps(spec, p, x, layer)
            assert post.tobytes() == plain.tobytes()
            assert trace.shape == (20, 128)
            assert np.all((trace > 0) & (trace < 1))

    def test_four_dense_layers(self):
        spec = tiny_dense_spec(10, (32,) * 4, 3)
        p = init_network(spec, 0)
        x = np.random.default_rng(0).normal(size=(50, 10))
        for layer in range(1, 5):
            assert forward_with_taps(spec, p, x, layer)[1].shape == (50, 32)

    @pytest.mark.parametrize("layer", [0, 5, -1])
    def test_bad_index(self, layer):
        spec = tiny_dense_spec(10, (8,) * 4, 3)
        with pytest.raises(InputError):
            forward_with_taps(spec, init_network(spec, 0), np.zeros((2, 10)), layer)


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_dense(self, seed):
        assert finite_difference_check(tiny_dense_spec(4, (5, 4), 3), seed) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_tfcnn(self, seed):
        assert finite_difference_check(tiny_tfcnn_spec(), seed, l2=0.1) < 1e-4

    def test_l2_term(self):
        spec = tiny_dense_spec(3, (2,), 2)
        p = init_network(spec, 0, dtype=np.float64)
        x, y = np.zeros((1, 3)), np.array([0])
        l0, _ = loss_and_grad(spec, p, x, y, 0.0)
        l1, _ = loss_and_grad(spec, p, x, y, 2.0)
        weights = sum(np.sum(w ** 2) for w in p.arrays[::2])
        assert l1 - l0 == pytest.approx(weights, rel=1e-12)


def separable_toy(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(np.int64)
    keep = np.abs(x[:, 0] + 0.5 * x[:, 1]) > 0.1
    return x[keep], y[keep]


class TestTrain:
    def test_zero_epochs_identity(self):
        spec = tiny_dense_spec(2, (4,), 2)
        p = init_network(spec, 0)
        x, y = separable_toy()
        out, log = train(spec, p, frames_of(x, y), frames_of(x, y), TrainConfig(max_epochs=0))
        assert out.identical_to(p) and not log.records

    def test_separable_toy(self):
        x, y = separable_toy()
        # independent oracle: a perceptron reaches zero training error, so the set is separable
        w = np.zeros(3)
        xb = np.hstack([x, np.ones((len(x), 1))])
        for _ in range(100):
            for xi, yi in zip(xb, 2 * y - 1):
                if yi * (xi @ w) <= 0:
                    w += yi * xi
        assert np.all((xb @ w > 0) == (y == 1))
        spec = tiny_dense_spec(2, (8,), 2)
        xv, yv = separable_toy(seed=1)
        p, log = train(spec, init_network(spec, 0), frames_of(x, y), frames_of(xv, yv),
                       TrainConfig(lr0=0.05, minibatch=16, max_epochs=30))
        assert evaluate(spec, p, frames_of(x, y))["frame_error_rate"] < 0.02

    def test_schedule_trace(self):
        # noisy labels keep the CV error bouncing so the halving rule fires repeatedly
        rng = np.random.default_rng(0)
        x = rng.normal(size=(300, 4))
        y = rng.integers(0, 3, 300)
        spec = tiny_dense_spec(4, (6,), 3)
        cfg = TrainConfig(lr0=0.05, minibatch=32, max_epochs=15, max_stalls=100)
        _, log = train(spec, init_network(spec, 0), frames_of(x, y), frames_of(x[:100], y[:100]), cfg)
        recs = log.records
        best = evaluate(spec, init_network(spec, 0), frames_of(x[:100], y[:100]))["frame_error_rate"]
        halvings = 0
        for prev, nxt in zip(recs, recs[1:]):
            if prev.epoch < cfg.constant_epochs:
                assert nxt.lr == prev.lr
            elif prev.cv_frame_error >= best * (1 - cfg.min_improvement):
                assert nxt.lr == prev.lr / 2
                halvings += 1
            else:
                assert nxt.lr == prev.lr
            best = min(best, prev.cv_frame_error)
        assert halvings > 0
        assert all(r.lr == cfg.lr0 for r in recs[: cfg.constant_epochs])

    def test_returns_best_cv(self):
        x, y = separable_toy()
        spec = tiny_dense_spec(2, (4,), 2)
        cv = frames_of(*separable_toy(seed=2))
        p, log = train(spec, init_network(spec, 0), frames_of(x, y), cv, TrainConfig(lr0=0.05, max_epochs=6))
        assert evaluate(spec, p, cv)["frame_error_rate"] == log.best_cv_frame_error
        assert log.best_cv_frame_error == min(r.cv_frame_error for r in log.records)

    def test_bit_reproducible(self):
        x, y = separable_toy()
        spec = tiny_dense_spec(2, (4,), 2)
        runs = [train(spec, init_network(spec, 0), frames_of(x, y), frames_of(x, y),
                      TrainConfig(lr0=0.05, max_epochs=3, seed=5))[0] for _ in range(2)]
        assert runs[0].identical_to(runs[1])

    def test_divergence_names_epoch(self):
        x, y = separable_toy()
        spec = tiny_dense_spec(2, (4,), 2)
        with pytest.raises(TrainingDiverged, match="epoch 1"):
            train(spec, init_network(spec, 0), frames_of(x, y), frames_of(x, y),
                  TrainConfig(lr0=1e38, max_epochs=2))

    def test_empty_sets(self):
        with pytest.raises(InputError):
            FrameSet([], [], 0, 0)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr0=0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(minibatch=0).validate()

    def test_log_csv(self, tmp_path):
        x, y = separable_toy()
        spec = tiny_dense_spec(2, (4,), 2)
        _, log = train(spec, init_network(spec, 0), frames_of(x, y), frames_of(x, y), TrainConfig(max_epochs=2))
        log.write_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,lr,train_ce,cv_frame_error" and len(lines) == 3


class TestAdapt:
    def setup_method(self):
        self.x, self.y = separable_toy()
        self.spec = tiny_dense_spec(2, (6,), 2)
        self.p = init_network(self.spec, 0)

    def test_zero_lr(self):
        out, _ = adapt_finetune(self.spec, self.p, frames_of(self.x, self.y), frames_of(self.x, self.y),
                                AdaptConfig(lr0=0.0))
        assert out.identical_to(self.p)

    def test_paper_config_echo(self):
        _, log = adapt_finetune(self.spec, self.p, frames_of(self.x, self.y), frames_of(self.x, self.y),
                                AdaptConfig(lr0=0.004, l2=0.001, max_epochs=1))
        assert log.config["lr0"] == 0.004 and log.config["l2"] == 0.001
        assert log.records[0].lr == 0.004

    def test_weight_decay_shrinks(self):
        data = frames_of(self.x, self.y)
        a, _ = adapt_finetune(self.spec, self.p, data, data, AdaptConfig(l2=0.0, max_epochs=1))
        b, _ = adapt_finetune(self.spec, self.p, data, data, AdaptConfig(l2=10.0, max_epochs=1))
        assert b.norm() < a.norm()

    def test_halves_every_epoch_and_stops_on_cv(self):
        data = frames_of(self.x, self.y)
        p, log = adapt_finetune(self.spec, self.p, data, data, AdaptConfig(lr0=0.02, max_epochs=6))
        lrs = [r.lr for r in log.records]
        assert lrs == [0.02 / 2 ** i for i in range(len(lrs))]
        errs = [r.cv_frame_error for r in log.records]
        if log.stop_reason == "cv_increase":
            assert errs[-1] > min(errs[:-1])
        # the returned parameters never do worse on CV than the logged stopping value
        assert evaluate(self.spec, p, data)["frame_error_rate"] == log.best_cv_frame_error
        assert log.best_cv_frame_error == min(errs)


class TestEvaluate:
    def test_perfect(self):
        spec = NetworkSpec(2, 2, (dense(2), SOFTMAX))
        p = Parameters([np.array([[50.0, -50.0], [-50.0, 50.0]]), np.zeros(2)])
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        m = evaluate(spec, p, frames_of(x, [0, 1]))
        assert m["frame_error_rate"] == 0 and m["mean_cross_entropy"] < 1e-6

    def test_uniform_ce(self):
        spec = NetworkSpec(2, 5, (dense(5), SOFTMAX))
        p = Parameters([np.zeros((2, 5)), np.zeros(5)])
        m = evaluate(spec, p, frames_of(np.ones((7, 2)), [0, 1, 2, 3, 4, 0, 1]))
        assert m["mean_cross_entropy"] == pytest.approx(math.log(5), abs=1e-12)

    def test_ties_to_lowest(self):
        assert frame_error(np.full((3, 4), 0.25), [0, 0, 0]) == 0.0
        assert frame_error(np.full((2, 4), 0.25), [1, 2]) == 1.0

    def test_random_labels(self):
        rates = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            spec = tiny_dense_spec(5, (8,), 4)
            x = rng.normal(size=(4000, 5))
            rates.append(evaluate(spec, init_network(spec, seed), frames_of(x, rng.integers(0, 4, 4000)))
                         ["frame_error_rate"])
        assert abs(np.mean(rates) - 0.75) < 0.05
