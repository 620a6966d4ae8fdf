import math

import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from apps.netcore.exceptions import ArgumentError, ConfigurationError
from apps.netcore.network import LabeledBatch, NetConfig, ParamSet, init_params, zero_params
from apps.stream.generators import default_domains, sample_batch, sample_task
from apps.stream.rng import make_rng

from .detectors import (
    DetectorParams,
    EnergySign,
    calibrate_tau,
    default_ell,
    energy,
    ood_classify,
    ood_score,
    switch_detect,
    tau_from_scores,
)


def constant_logit_net():
    """One-feature linear net whose logits are [1, 0] for every input."""
    cfg = NetConfig(input_dim=1, hidden_dims=(), n_classes=2)
    return cfg, ParamSet(values=[0.0, 0.0, 1.0, 0.0], shape_spec=cfg.dims)


class DetectorParamsTests(SimpleTestCase):
    def test_rejects_non_positive_ell(self):
        with self.assertRaises(ConfigurationError):
            DetectorParams(ell=0.0, tau=0.0)

    def test_rejects_non_positive_delta(self):
        with self.assertRaises(ConfigurationError):
            DetectorParams(ell=1.0, tau=0.0, delta=0.0)

    def test_rejects_unknown_sign(self):
        with self.assertRaises(ConfigurationError):
            DetectorParams(ell=1.0, tau=0.0, energy_sign="flipped")

    def test_infinite_tau_allowed(self):
        self.assertEqual(DetectorParams(ell=1.0, tau=math.inf).tau, math.inf)


class EnergyTests(SimpleTestCase):
    def test_symmetric_logits(self):
        self.assertAlmostEqual(energy([0.0, 0.0], 1.0), -math.log(2), delta=1e-12)

    def test_closed_form(self):
        self.assertAlmostEqual(energy([1.0, 0.0], 1.0), -0.313262, places=6)

    def test_standard_sign(self):
        self.assertAlmostEqual(
            energy([1.0, 0.0], 1.0, sign="standard"), -math.log(math.e + 1.0), delta=1e-12
        )

    def test_translation_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            g = rng.normal(0.0, 3.0, size=6)
            c = rng.normal(0.0, 10.0)
            delta = rng.uniform(0.1, 5.0)
            self.assertAlmostEqual(energy(g + c, delta), energy(g, delta) + c, delta=1e-10)

    def test_small_temperature_collapses_to_min(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            g = rng.normal(size=5)
            self.assertLess(abs(energy(g, 1e-6) - g.min()), 1e-4)

    def test_rowwise_on_matrix(self):
        rows = np.array([[0.0, 0.0], [1.0, 0.0]])
        np.testing.assert_allclose(energy(rows), [-math.log(2), -0.3132616875], rtol=1e-9)

    def test_stable_for_large_logits(self):
        self.assertTrue(math.isfinite(energy([1e4, -1e4, 0.0], 1.0)))


class OodClassifyTests(SimpleTestCase):
    def setUp(self):
        self.cfg, self.params = constant_logit_net()
        self.support = np.array([[0.7]])

    def test_infinite_thresholds(self):
        rows = np.random.default_rng(2).normal(size=(5, 1))
        shifted = DetectorParams(ell=1.0, tau=math.inf)
        never = DetectorParams(ell=1.0, tau=-math.inf)
        self.assertTrue(ood_classify(rows, self.params, self.cfg, shifted))
        self.assertFalse(ood_classify(rows, self.params, self.cfg, never))

    def test_score_above_tau_is_in_distribution(self):
        self.assertAlmostEqual(ood_score(self.support, self.params, self.cfg), 0.313262, places=6)
        det = DetectorParams(ell=1.0, tau=0.3)
        self.assertFalse(ood_classify(self.support, self.params, self.cfg, det))

    def test_tie_counts_as_shift(self):
        score = ood_score(self.support, self.params, self.cfg)
        det = DetectorParams(ell=1.0, tau=score)
        self.assertTrue(ood_classify(self.support, self.params, self.cfg, det))

    def test_empty_support(self):
        with self.assertRaises(ArgumentError):
            ood_score(np.zeros((0, 1)), self.params, self.cfg)


class SwitchDetectTests(SimpleTestCase):
    def setUp(self):
        self.cfg = NetConfig(input_dim=3, hidden_dims=(), n_classes=10)
        self.support = LabeledBatch(inputs=[[0.1, 0.2, 0.3]], labels=[4])

    def test_random_model_loss_above_threshold(self):
        switched, loss = switch_detect(zero_params(self.cfg), self.cfg, self.support, ell=2.3)
        self.assertTrue(switched)
        self.assertAlmostEqual(loss, 2.302585, places=6)

    def test_equal_loss_is_no_switch(self):
        _, loss = switch_detect(zero_params(self.cfg), self.cfg, self.support, ell=1.0)
        switched, _ = switch_detect(zero_params(self.cfg), self.cfg, self.support, ell=loss)
        self.assertFalse(switched)


class TauCalibrationTests(SimpleTestCase):
    def test_order_statistic(self):
        self.assertEqual(tau_from_scores(np.arange(1, 101), 0.95), 5.0)

    def test_exact_coverage_on_enumerated_scores(self):
        scores = np.arange(1, 101)
        tau = tau_from_scores(scores, 0.95)
        self.assertEqual(np.mean(scores > tau), 0.95)

    def test_tied_scores_keep_coverage(self):
        scores = np.array([1.0, 2.0, 3.0, 3.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
        tau = tau_from_scores(scores, 0.7)
        self.assertEqual(tau, 2.0)
        self.assertGreaterEqual(np.mean(scores > tau), 0.7)

    def test_tie_at_the_minimum(self):
        scores = np.array([1.0, 1.0, 1.0, 2.0, 3.0])
        tau = tau_from_scores(scores, 0.6)
        self.assertLess(tau, 1.0)
        self.assertEqual(np.mean(scores > tau), 1.0)

    def test_aliases_name_the_same_convention(self):
        self.assertIs(EnergySign("paper"), EnergySign.NEGATED)
        self.assertIs(EnergySign("literature"), EnergySign.STANDARD)

    def test_near_full_coverage_sits_below_minimum(self):
        scores = np.random.default_rng(3).normal(size=50)
        tau = tau_from_scores(scores, 1.0 - 1e-6)
        self.assertLess(tau, scores.min())
        self.assertEqual(np.mean(scores > tau), 1.0)

    def test_deterministic(self):
        scores = np.random.default_rng(4).normal(size=200)
        self.assertEqual(tau_from_scores(scores), tau_from_scores(scores))

    def test_empty_scores(self):
        with self.assertRaises(ArgumentError):
            tau_from_scores([])
        with self.assertRaises(ArgumentError):
            calibrate_tau([], None, None)

    def test_held_out_coverage_matches_request(self):
        n = 200
        rng = np.random.default_rng(5)
        held_out = [
            stats.norm.sf(tau_from_scores(rng.normal(size=n), 0.95)) for _ in range(1000)
        ]
        self.assertLess(abs(np.mean(held_out) - 0.95), 1.0 / n)

    def test_calibrate_on_network_supports(self):
        cfg = NetConfig(input_dim=4, hidden_dims=(8,), n_classes=3)
        params = init_params(cfg, make_rng(6))
        domain = default_domains(4, 3)[0]
        rng = make_rng(7)
        supports = [
            sample_batch(sample_task(domain, rng), 5, 1, domain.sample_noise_sigma, rng)
            .support.inputs
            for _ in range(40)
        ]
        tau = calibrate_tau(supports, params, cfg)
        scores = np.array([ood_score(s, params, cfg) for s in supports])
        self.assertGreaterEqual(np.mean(scores > tau), 0.95)

    def test_few_supports_warn(self):
        cfg, params = constant_logit_net()
        with self.assertLogs("apps.detect.detectors", level="WARNING"):
            calibrate_tau([np.array([[0.0]])] * 5, params, cfg)


class DefaultEllTests(SimpleTestCase):
    def test_values(self):
        self.assertAlmostEqual(default_ell(10), 2.302585, delta=1e-6)
        self.assertAlmostEqual(default_ell(2), 0.6931, places=4)
        self.assertAlmostEqual(default_ell(4), 1.3863, places=4)

    def test_rejects_single_way(self):
        with self.assertRaises(ArgumentError):
            default_ell(1)
