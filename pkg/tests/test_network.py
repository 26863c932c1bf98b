"""Tests for the CNN forward/backward passes against independent oracles."""

import math

import numpy as np
import pytest

from emocnn.corpus import DataError
from emocnn.functions import (
    ACTIVATION_KINDS,
    Activation,
    mlrelu_continuous,
    sigmoid_activation,
)
from emocnn.network import (
    ModelParams,
    NetworkConfig,
    backward,
    conv_forward,
    dropout_mask,
    forward,
    init_params,
    load_model,
    maxpool,
    params_digest,
    predict,
    sample_loss,
    save_model,
    sgd_step,
)


def tiny_config(**overrides):
    base = dict(
        filter_widths=(2,),
        maps_per_width=2,
        embedding_dim=3,
        num_classes=2,
        dropout_rate=0.0,
        activation=mlrelu_continuous(),
        seed=0,
    )
    base.update(overrides)
    return NetworkConfig(**base)


def numeric_gradients(params, sentence, target, weight, h=1e-5, mask_seed=None):
    """Central-difference oracle over every parameter entry.

    The dropout mask is pinned by re-seeding the generator for every probe,
    so the probed loss is a deterministic function of the parameters.
    """

    def loss_at(p):
        rng = np.random.default_rng(mask_seed) if mask_seed is not None else None
        return sample_loss(forward(p, sentence, rng=rng), target, weight)

    numeric = params.zeros_like()
    for (name, block), (_, out) in zip(params.named_blocks(), numeric.named_blocks()):
        it = np.nditer(block, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            probe = params.copy()
            dict(probe.named_blocks())[name][idx] = block[idx] + h
            plus = loss_at(probe)
            dict(probe.named_blocks())[name][idx] = block[idx] - h
            minus = loss_at(probe)
            out[idx] = (plus - minus) / (2 * h)
    return numeric


def max_relative_error(analytic, numeric):
    worst = 0.0
    for (_, a), (_, n) in zip(analytic.named_blocks(), numeric.named_blocks()):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def fixture_is_smooth(trace, activation, margin=1e-4):
    """Reject fixtures whose loss is within `margin` of a non-smooth point."""
    boundary = activation.boundary
    for w, pre in trace.pre_activations.items():
        if boundary is not None and np.any(np.abs(pre - boundary) < margin):
            return False
        fmap = trace.activations[w]
        if fmap.shape[1] >= 2:
            top2 = np.sort(fmap, axis=1)[:, -2:]
            if np.any(top2[:, 1] - top2[:, 0] < margin):
                return False
    return True


class TestInitParams:
    def test_fc_shape(self):
        config = NetworkConfig(
            filter_widths=(3, 4, 5), maps_per_width=100, embedding_dim=8
        )
        params = init_params(config)
        assert params.fc_weights.shape == (2, 300)

    def test_deterministic(self):
        config = tiny_config(seed=5)
        a, b = init_params(config), init_params(config)
        for (_, x), (_, y) in zip(a.named_blocks(), b.named_blocks()):
            np.testing.assert_array_equal(x, y)

    def test_biases_start_at_zero(self):
        params = init_params(tiny_config())
        np.testing.assert_array_equal(params.filter_biases[2], 0.0)
        np.testing.assert_array_equal(params.fc_bias, 0.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NetworkConfig(filter_widths=(3, 3), maps_per_width=1, embedding_dim=4)
        with pytest.raises(ValueError):
            NetworkConfig(filter_widths=(3,), maps_per_width=1, embedding_dim=4,
                          dropout_rate=1.0)


class TestConvForward:
    sentence = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])

    def test_hand_dot_product(self):
        # windows: rows 0-1 sum of products = 10, rows 1-2 = 18
        fmap = conv_forward(np.ones((2, 2)), 0.0, self.sentence, mlrelu_continuous())
        np.testing.assert_allclose(fmap, [10.0, 18.0])

    def test_sigmoid_of_same_preactivations(self):
        fmap = conv_forward(np.ones((2, 2)), 0.0, self.sentence, sigmoid_activation())
        expected = [1 / (1 + math.exp(-10)), 1 / (1 + math.exp(-18))]
        np.testing.assert_allclose(fmap, expected, atol=1e-12)

    def test_zero_filter_gives_activation_of_zero(self):
        fmap = conv_forward(np.zeros((2, 2)), 0.0, self.sentence, mlrelu_continuous())
        np.testing.assert_array_equal(fmap, [0.0, 0.0])

    def test_map_length(self):
        rng = np.random.default_rng(0)
        for length, width in ((5, 2), (7, 3), (4, 4)):
            sentence = rng.normal(size=(length, 3))
            fmap = conv_forward(rng.normal(size=(width, 3)), 0.1, sentence,
                                mlrelu_continuous())
            assert fmap.shape == (length - width + 1,)

    def test_sentence_shorter_than_filter_rejected(self):
        with pytest.raises(ValueError):
            conv_forward(np.ones((4, 2)), 0.0, self.sentence, mlrelu_continuous())


class TestMaxpool:
    def test_maximum_and_position(self):
        assert maxpool(np.array([10.0, 18.0])) == (18.0, 1)

    def test_ties_take_smallest_index(self):
        assert maxpool(np.array([3.0, 3.0])) == (3.0, 0)

    def test_against_linear_scan(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            v = rng.normal(size=rng.integers(1, 12))
            value, idx = maxpool(v)
            best_val, best_idx = v[0], 0
            for i, x in enumerate(v):
                if x > best_val:
                    best_val, best_idx = x, i
            assert value == best_val and idx == best_idx

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            maxpool(np.array([]))


class TestForward:
    def test_probabilities_sum_to_one(self):
        params = init_params(tiny_config())
        rng = np.random.default_rng(1)
        trace = forward(params, rng.normal(size=(5, 3)))
        assert abs(trace.probs.sum() - 1.0) < 1e-12

    def test_zero_dropout_train_equals_eval(self):
        params = init_params(tiny_config(dropout_rate=0.0))
        sentence = np.random.default_rng(2).normal(size=(5, 3))
        train = forward(params, sentence, rng=np.random.default_rng(0))
        ev = forward(params, sentence)
        np.testing.assert_array_equal(train.probs, ev.probs)

    def test_fixed_dropout_seed_reproduces_trace(self):
        params = init_params(tiny_config(dropout_rate=0.4))
        sentence = np.random.default_rng(2).normal(size=(5, 3))
        t1 = forward(params, sentence, rng=np.random.default_rng(7))
        t2 = forward(params, sentence, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(t1.dropout_mask, t2.dropout_mask)
        np.testing.assert_array_equal(t1.probs, t2.probs)

    def test_shape_mismatch_rejected(self):
        params = init_params(tiny_config())
        with pytest.raises(ValueError):
            forward(params, np.zeros((5, 4)))

    def test_inverted_dropout_keeps_expectation(self):
        # Mean of the scaled mask over many draws stays within 1% of 1.
        rng = np.random.default_rng(3)
        total = np.zeros(6)
        n = 100_000
        for _ in range(n):
            total += dropout_mask(rng, 6, 0.4)
        np.testing.assert_allclose(total / n, 1.0, rtol=0.01)


class TestBackward:
    def test_matches_finite_differences_on_tiny_model(self):
        config = tiny_config(embedding_dim=3, filter_widths=(2,), maps_per_width=2)
        rng = np.random.default_rng(42)
        checked = 0
        while checked < 5:
            params = init_params(tiny_config(seed=int(rng.integers(1 << 30))))
            sentence = rng.normal(size=(4, 3))
            trace = forward(params, sentence)
            if not fixture_is_smooth(trace, config.activation):
                continue
            target = int(rng.integers(2))
            grads = backward(params, trace, target, 1.0)
            numeric = numeric_gradients(params, sentence, target, 1.0)
            assert max_relative_error(grads, numeric) <= 1e-4
            checked += 1

    @pytest.mark.parametrize("kind", ACTIVATION_KINDS)
    def test_every_activation_kind_and_dropout(self, kind):
        rng = np.random.default_rng(1000 + ACTIVATION_KINDS.index(kind))
        checked = 0
        attempts = 0
        while checked < 4 and attempts < 200:
            attempts += 1
            config = tiny_config(
                activation=Activation(kind),
                dropout_rate=float(rng.choice([0.0, 0.4])),
                maps_per_width=int(rng.integers(1, 3)),
                seed=int(rng.integers(1 << 30)),
            )
            params = init_params(config)
            sentence = rng.normal(size=(int(rng.integers(4, 7)), 3))
            mask_seed = int(rng.integers(1 << 30)) if config.dropout_rate > 0 else None
            mask_rng = np.random.default_rng(mask_seed) if mask_seed is not None else None
            trace = forward(params, sentence, rng=mask_rng)
            if not fixture_is_smooth(trace, config.activation):
                continue
            target = int(rng.integers(2))
            weight = float(rng.choice([1.0, 1.7]))
            grads = backward(params, trace, target, weight)
            numeric = numeric_gradients(
                params, sentence, target, weight, mask_seed=mask_seed
            )
            assert max_relative_error(grads, numeric) <= 1e-4, f"kind={kind}"
            checked += 1
        assert checked == 4

    def test_gradients_scale_linearly_in_sample_weight(self):
        params = init_params(tiny_config(seed=3))
        sentence = np.random.default_rng(5).normal(size=(5, 3))
        trace = forward(params, sentence)
        g1 = backward(params, trace, target=1, sample_weight=1.0)
        g2 = backward(params, trace, target=1, sample_weight=2.0)
        for (_, a), (_, b) in zip(g1.named_blocks(), g2.named_blocks()):
            np.testing.assert_array_equal(2.0 * a, b)

    def test_saturation_contrast_at_large_preactivation(self):
        # Pre-activation +50 at the argmax: the sigmoid gradient vanishes,
        # the modified activation still passes a usable gradient through.
        sentence = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])

        def grads_for(activation):
            config = NetworkConfig(
                filter_widths=(2,), maps_per_width=1, embedding_dim=2,
                dropout_rate=0.0, activation=activation, seed=0,
            )
            params = ModelParams(
                config=config,
                filters={2: np.array([[[50.0, 0.0], [0.0, 0.0]]])},
                filter_biases={2: np.zeros(1)},
                fc_weights=np.array([[1.0], [-1.0]]),
                fc_bias=np.zeros(2),
            )
            trace = forward(params, sentence)
            assert trace.pre_activations[2][0, trace.argmax[2][0]] == 50.0
            return backward(params, trace, target=1, sample_weight=1.0)

        sig = grads_for(sigmoid_activation())
        mod = grads_for(mlrelu_continuous())
        assert np.max(np.abs(sig.filters[2])) < 1e-20
        assert np.max(np.abs(mod.filters[2])) > 1e-3


class TestSgdStep:
    def test_zero_learning_rate_is_identity(self):
        params = init_params(tiny_config())
        trace = forward(params, np.random.default_rng(0).normal(size=(4, 3)))
        grads = backward(params, trace, 0, 1.0)
        updated = sgd_step(params, grads, 0.0)
        for (_, a), (_, b) in zip(params.named_blocks(), updated.named_blocks()):
            np.testing.assert_array_equal(a, b)

    def test_scalar_arithmetic(self):
        params = init_params(tiny_config())
        grads = params.zeros_like()
        params.fc_bias[0] = 1.0
        grads.fc_bias[0] = 0.5
        updated = sgd_step(params, grads, 0.2)
        assert updated.fc_bias[0] == pytest.approx(0.9)

    def test_two_steps_equal_one_with_doubled_rate(self):
        params = init_params(tiny_config(seed=11))
        grads = init_params(tiny_config(seed=12))  # arbitrary fixed direction
        twice = sgd_step(sgd_step(params, grads, 0.1), grads, 0.1)
        once = sgd_step(params, grads, 0.2)
        for (_, a), (_, b) in zip(twice.named_blocks(), once.named_blocks()):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_nonfinite_gradient_names_block(self):
        params = init_params(tiny_config())
        grads = params.zeros_like()
        grads.fc_weights[0, 0] = float("nan")
        with pytest.raises(ValueError, match="fc_weights"):
            sgd_step(params, grads, 0.1)

    def test_pure_function_leaves_input_untouched(self):
        params = init_params(tiny_config())
        grads = init_params(tiny_config(seed=9))
        before = params.copy()
        sgd_step(params, grads, 0.5)
        for (_, a), (_, b) in zip(params.named_blocks(), before.named_blocks()):
            np.testing.assert_array_equal(a, b)


class TestPredict:
    def test_argmax_and_tie_break(self):
        params = init_params(tiny_config())
        sentence = np.random.default_rng(4).normal(size=(5, 3))
        cls, probs = predict(params, sentence)
        assert cls == int(np.argmax(probs))
        assert np.argmax([0.5, 0.5]) == 0  # ties resolve to the smaller index

    def test_deterministic(self):
        params = init_params(tiny_config())
        sentence = np.random.default_rng(4).normal(size=(5, 3))
        assert predict(params, sentence)[0] == predict(params, sentence)[0]
        np.testing.assert_array_equal(
            predict(params, sentence)[1], predict(params, sentence)[1]
        )


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(tiny_config(filter_widths=(2, 3), seed=8))
        path = tmp_path / "model.json"
        save_model(path, params, embedding_ref="embeddings.json")
        loaded = load_model(path)
        assert params_digest(loaded) == params_digest(params)
        assert loaded.config == params.config

    def test_shape_validation(self, tmp_path):
        params = init_params(tiny_config())
        path = tmp_path / "model.json"
        save_model(path, params)
        import json

        payload = json.loads(path.read_text())
        payload["fc_weights"] = payload["fc_weights"][:-1]
        path.write_text(json.dumps(payload))
        with pytest.raises(DataError, match="fully connected"):
            load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_model(tmp_path / "missing.json")
