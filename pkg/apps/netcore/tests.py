import numpy as np
from django.test import SimpleTestCase

from .exceptions import ArgumentError, ConfigurationError, NumericError
from .network import (
    LabeledBatch,
    NetConfig,
    ParamSet,
    ce_loss,
    finite_diff_grad,
    forward,
    init_params,
    loss_and_grad,
    sgd_step,
    zero_params,
)


def random_case(rng, dims, activation="tanh", n_rows=6):
    cfg = NetConfig(
        input_dim=dims[0], hidden_dims=dims[1:-1], n_classes=dims[-1], activation=activation
    )
    params = ParamSet(values=rng.normal(0.0, 0.5, cfg.n_params), shape_spec=cfg.dims)
    batch = LabeledBatch(
        inputs=rng.normal(size=(n_rows, cfg.input_dim)),
        labels=rng.integers(0, cfg.n_classes, size=n_rows),
    )
    return cfg, params, batch


def looped_forward(params, cfg, inputs):
    rows = []
    for x in inputs:
        current = list(x)
        layers = list(params.layers())
        for index, (weights, biases) in enumerate(layers):
            nxt = []
            for j in range(weights.shape[1]):
                total = biases[j]
                for i in range(weights.shape[0]):
                    total += current[i] * weights[i, j]
                if index < len(layers) - 1:
                    total = max(total, 0.0) if cfg.activation == "relu" else np.tanh(total)
                nxt.append(total)
            current = nxt
        rows.append(current)
    return np.array(rows)


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)


class NetConfigTests(SimpleTestCase):
    def test_rejects_single_class(self):
        with self.assertRaises(ConfigurationError):
            NetConfig(input_dim=2, hidden_dims=(), n_classes=1)

    def test_rejects_zero_width_hidden_layer(self):
        with self.assertRaises(ConfigurationError):
            NetConfig(input_dim=2, hidden_dims=(0,), n_classes=2)

    def test_param_count(self):
        cfg = NetConfig(input_dim=8, hidden_dims=(16, 16), n_classes=5)
        self.assertEqual(cfg.n_params, 9 * 16 + 17 * 16 + 17 * 5)

    def test_param_set_length_must_match_layout(self):
        with self.assertRaises(ConfigurationError):
            ParamSet(values=np.zeros(5), shape_spec=(2, 2))

    def test_param_set_rejects_non_finite(self):
        with self.assertRaises(NumericError):
            ParamSet(values=[np.nan] * 6, shape_spec=(2, 2))

    def test_glorot_init_bounds_and_zero_biases(self):
        cfg = NetConfig(input_dim=4, hidden_dims=(6,), n_classes=3)
        params = init_params(cfg, np.random.default_rng(0))
        for (weights, biases), (fan_in, fan_out) in zip(params.layers(), [(4, 6), (6, 3)]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.assertTrue(np.all(np.abs(weights) <= limit))
            np.testing.assert_array_equal(biases, 0.0)


class ForwardTests(SimpleTestCase):
    def test_zero_params_give_zero_logits(self):
        cfg = NetConfig(input_dim=3, hidden_dims=(4,), n_classes=3)
        logits = forward(zero_params(cfg), cfg, np.random.default_rng(1).normal(size=(5, 3)))
        np.testing.assert_array_equal(logits, np.zeros((5, 3)))

    def test_duplicated_rows_give_identical_logits(self):
        cfg, params, batch = random_case(np.random.default_rng(2), (4, 5, 3))
        inputs = np.vstack([batch.inputs[:1], batch.inputs[:1]])
        logits = forward(params, cfg, inputs)
        np.testing.assert_array_equal(logits[0], logits[1])

    def test_matches_looped_reference(self):
        rng = np.random.default_rng(3)
        for activation in ("relu", "tanh"):
            cfg, params, batch = random_case(rng, (4, 6, 5, 3), activation=activation)
            np.testing.assert_allclose(
                forward(params, cfg, batch.inputs),
                looped_forward(params, cfg, batch.inputs),
                rtol=1e-12,
                atol=1e-12,
            )

    def test_dimension_mismatch(self):
        cfg = NetConfig(input_dim=3, hidden_dims=(), n_classes=2)
        with self.assertRaises(ConfigurationError):
            forward(zero_params(cfg), cfg, np.zeros((2, 4)))

    def test_deterministic(self):
        cfg, params, batch = random_case(np.random.default_rng(4), (4, 6, 3))
        first = forward(params, cfg, batch.inputs)
        second = forward(params, cfg, batch.inputs)
        self.assertEqual(first.tobytes(), second.tobytes())


class CrossEntropyTests(SimpleTestCase):
    def test_uniform_logits_give_log_k(self):
        for k in (2, 5, 10):
            self.assertAlmostEqual(ce_loss(np.zeros((3, k)), [0, 1, 1]), np.log(k), delta=1e-12)

    def test_ten_way_random_model_loss(self):
        self.assertAlmostEqual(ce_loss(np.zeros((1, 10)), [3]), 2.302585, places=6)

    def test_saturated_margin(self):
        self.assertLess(ce_loss(np.array([[50.0, 0.0, 0.0]]), [0]), 1e-20)

    def test_hand_value(self):
        self.assertAlmostEqual(ce_loss(np.array([[2.0, 1.0, 0.0]]), [0]), 0.407606, places=6)

    def test_empty_batch(self):
        with self.assertRaises(ArgumentError):
            ce_loss(np.zeros((0, 3)), [])

    def test_invalid_label(self):
        with self.assertRaises(ArgumentError):
            ce_loss(np.zeros((1, 3)), [3])


class GradientTests(SimpleTestCase):
    def test_matches_finite_differences_on_random_nets(self):
        rng = np.random.default_rng(5)
        shapes = [(2, 3), (3, 4, 2), (4, 8, 3), (8, 16, 16, 5)]
        for draw in range(100):
            dims = shapes[draw % len(shapes)]
            activation = "relu" if draw % 2 else "tanh"
            cfg, params, batch = random_case(rng, dims, activation=activation)
            _, grad = loss_and_grad(params, cfg, batch)
            numeric = finite_diff_grad(params, cfg, batch, eps=1e-5)
            self.assertLess(relative_error(grad, numeric), 1e-4, msg=f"draw {draw}")

    def test_loss_matches_ce_loss(self):
        cfg, params, batch = random_case(np.random.default_rng(6), (3, 5, 4))
        loss, _ = loss_and_grad(params, cfg, batch)
        self.assertAlmostEqual(loss, ce_loss(forward(params, cfg, batch.inputs), batch.labels))

    def test_saturated_single_sample_is_stationary(self):
        cfg = NetConfig(input_dim=2, hidden_dims=(3,), n_classes=3)
        values = np.zeros(cfg.n_params)
        values[-3] = 60.0
        params = ParamSet(values=values, shape_spec=cfg.dims)
        batch = LabeledBatch(inputs=[[0.3, -0.7]], labels=[0])
        _, grad = loss_and_grad(params, cfg, batch)
        self.assertLess(np.linalg.norm(grad), 1e-8)

    def test_duplicated_batch_gives_same_gradient(self):
        cfg, params, batch = random_case(np.random.default_rng(7), (3, 5, 4))
        doubled = LabeledBatch(
            inputs=np.vstack([batch.inputs, batch.inputs]),
            labels=np.concatenate([batch.labels, batch.labels]),
        )
        _, grad = loss_and_grad(params, cfg, batch)
        _, grad_doubled = loss_and_grad(params, cfg, doubled)
        np.testing.assert_allclose(grad, grad_doubled, rtol=1e-12, atol=1e-15)

    def test_label_out_of_range(self):
        cfg = NetConfig(input_dim=2, hidden_dims=(), n_classes=2)
        with self.assertRaises(ArgumentError):
            loss_and_grad(zero_params(cfg), cfg, LabeledBatch(inputs=[[0.0, 1.0]], labels=[2]))


class SgdStepTests(SimpleTestCase):
    def setUp(self):
        self.params = ParamSet(values=[1.0, 2.0], shape_spec=(1, 1))

    def test_hand_arithmetic(self):
        stepped = sgd_step(self.params, np.array([0.5, -1.0]), 0.1)
        np.testing.assert_allclose(stepped.values, [0.95, 2.1], rtol=0, atol=1e-15)
        np.testing.assert_array_equal(self.params.values, [1.0, 2.0])

    def test_zero_rate_and_zero_gradient(self):
        np.testing.assert_array_equal(
            sgd_step(self.params, np.array([3.0, 4.0]), 0.0).values, self.params.values
        )
        np.testing.assert_array_equal(
            sgd_step(self.params, np.zeros(2), 0.5).values, self.params.values
        )

    def test_affine_in_gradient(self):
        rng = np.random.default_rng(8)
        g1, g2 = rng.normal(size=2), rng.normal(size=2)
        combined = sgd_step(self.params, g1 + g2, 0.3).values
        np.testing.assert_allclose(combined, self.params.values - 0.3 * (g1 + g2), rtol=1e-15)

    def test_non_finite_gradient(self):
        with self.assertRaises(NumericError):
            sgd_step(self.params, np.array([np.inf, 0.0]), 0.1)

    def test_shape_mismatch(self):
        with self.assertRaises(ArgumentError):
            sgd_step(self.params, np.zeros(3), 0.1)


class FiniteDifferenceTests(SimpleTestCase):
    def test_quadratic_surrogate_is_exact(self):
        params = ParamSet(values=np.random.default_rng(9).normal(size=6), shape_spec=(2, 2))
        grad = finite_diff_grad(
            params, None, None, eps=1e-5, objective=lambda w: 0.5 * float(w @ w)
        )
        np.testing.assert_allclose(grad, params.values, rtol=0, atol=1e-10)

    def test_second_order_convergence(self):
        cfg, params, batch = random_case(np.random.default_rng(10), (3, 4, 3), activation="tanh")
        _, exact = loss_and_grad(params, cfg, batch)
        coarse = np.linalg.norm(finite_diff_grad(params, cfg, batch, eps=1e-2) - exact)
        fine = np.linalg.norm(finite_diff_grad(params, cfg, batch, eps=5e-3) - exact)
        self.assertGreater(coarse / fine, 3.0)
        self.assertLess(coarse / fine, 5.0)

    def test_eps_out_of_range(self):
        cfg, params, batch = random_case(np.random.default_rng(11), (2, 2))
        with self.assertRaises(ArgumentError):
            finite_diff_grad(params, cfg, batch, eps=0.1)
