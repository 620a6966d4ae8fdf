import math
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase, tag

from apps.detect.detectors import DetectorParams, default_ell
from apps.learner.services.online_service import run_stream
from apps.learner.testing import pretrained_theta
from apps.learner.types import Hyperparams, LearnerMode, LearnerState
from apps.netcore.exceptions import ArgumentError, ConfigurationError, RegimeError
from apps.netcore.network import NetConfig, init_params
from apps.stream.generators import DomainSpec, StreamConfig, default_domains, sample_task
from apps.stream.rng import RngPurpose, make_rng

from .bounds import (
    average_reports,
    empirical_detection_error,
    hoeffding_bound,
    levels_from_losses,
    theory_run,
)
from .quadratic import (
    alpha_for_rho,
    closed_form_rho,
    contraction_ratio,
    contraction_trace,
    gradient_lipschitz_ratio,
    make_quad_family,
    random_spectrum,
)
from .regret import compute_comparator, regret_from_losses, task_averaged_regret
from .services.report_service import TheoryReportService
from .types import QuadTask, QuadTaskFamily, TheoryConfig

NET = NetConfig(input_dim=4, hidden_dims=(8,), n_classes=3)
HP = Hyperparams(alpha1=0.5, alpha2=0.05, pretrain_tasks=0)
DET = DetectorParams(ell=default_ell(3), tau=0.0)


def one_dim_family(centers, ks, alpha=1.0, noise_sigma=0.0):
    tasks = [QuadTask(center=[c], curvature=[1.0]) for c in centers]
    return QuadTaskFamily(
        dim=1, tasks=tasks, mu=1.0, beta=1.0, alpha=alpha, K_per_task=ks, noise_sigma=noise_sigma
    )


def seed_average(build, n_tasks, seeds=20, **kwargs):
    reports = [
        theory_run(
            build(make_rng(seed, RngPurpose.THEORY)).truncated(n_tasks),
            rng=make_rng(seed, RngPurpose.DETECTION),
            **kwargs,
        )
        for seed in range(seeds)
    ]
    return average_reports(reports)


class TheoryConfigTests(SimpleTestCase):
    def test_levels_must_be_ordered(self):
        with self.assertRaises(ConfigurationError):
            TheoryConfig(ell_m=1.0, ell_p=0.5)

    def test_levels_bounded_by_clip(self):
        with self.assertRaises(ConfigurationError):
            TheoryConfig(M_clip=1.0, ell_m=0.0, ell_p=2.0)

    def test_auto_constant_exceeds_detection_threshold(self):
        cfg = TheoryConfig(M_clip=2.0, ell_m=0.5, ell_p=1.5)
        self.assertEqual(cfg.auto_c(), 17)
        self.assertGreater(cfg.auto_c(), 4 * cfg.M_clip**2 / cfg.gap**2)

    def test_support_size_grows_with_log_rounds(self):
        cfg = TheoryConfig(c_support=2.0)
        self.assertEqual(cfg.support_size(1), 1)
        self.assertEqual(cfg.support_size(100), math.ceil(2.0 * math.log(100)))

    def test_support_size_needs_separated_levels(self):
        with self.assertRaises(ConfigurationError):
            TheoryConfig().support_size(100)


class HoeffdingBoundTests(SimpleTestCase):
    def test_equal_levels_are_vacuous(self):
        self.assertEqual(hoeffding_bound(50, TheoryConfig(ell_m=0.7, ell_p=0.7)), 1.0)

    def test_hand_value(self):
        cfg = TheoryConfig(M_clip=2.302585, ell_m=0.5, ell_p=1.5)
        self.assertAlmostEqual(hoeffding_bound(20, cfg), 0.1517, places=3)
        self.assertAlmostEqual(
            hoeffding_bound(20, cfg), math.exp(-20 / (2 * 2.302585**2)), delta=1e-15
        )

    def test_doubling_support_squares_bound(self):
        cfg = TheoryConfig(M_clip=3.0, ell_m=0.2, ell_p=1.9)
        for size in (1, 4, 13):
            self.assertAlmostEqual(
                hoeffding_bound(2 * size, cfg), hoeffding_bound(size, cfg) ** 2, delta=1e-15
            )

    def test_rejects_empty_support(self):
        with self.assertRaises(ArgumentError):
            hoeffding_bound(0, TheoryConfig())


class ContractionTests(SimpleTestCase):
    def test_newton_step_on_identity(self):
        empirical, closed = contraction_ratio(1.0, 1.0, 1.0, trials=10, rng=make_rng(0))
        self.assertEqual(closed, 0.0)
        self.assertLess(empirical, 1e-12)

    def test_hand_value(self):
        empirical, closed = contraction_ratio(0.5, 2.0, 0.5, trials=20, rng=make_rng(1))
        self.assertEqual(closed, 0.75)
        self.assertAlmostEqual(empirical, 0.75, delta=1e-8)

    def test_boundary_step_size(self):
        empirical, closed = contraction_ratio(0.5, 2.0, 1.0, trials=20, rng=make_rng(2))
        self.assertEqual(closed, 1.0)
        self.assertLessEqual(empirical, 1 + 1e-10)

    def test_rejects_expanding_step(self):
        with self.assertRaises(ArgumentError):
            contraction_ratio(0.5, 2.0, 1.5, trials=1, rng=make_rng(3))

    def test_closed_form_agrees_on_random_quadratics(self):
        rng = make_rng(4)
        for _ in range(50):
            mu = rng.uniform(0.1, 1.0)
            beta = mu + rng.uniform(0.0, 3.0)
            alpha = rng.uniform(0.05, 1.95) / beta
            empirical, closed = contraction_ratio(mu, beta, alpha, trials=3, rng=rng)
            self.assertAlmostEqual(empirical, closed, delta=1e-8)

    def test_chained_decay(self):
        rng = make_rng(5)
        for _ in range(50):
            mu, beta = 0.5, 2.0
            alpha = rng.uniform(0.05, 1.0)
            task = QuadTask(center=rng.normal(size=4), curvature=random_spectrum(4, mu, beta, rng))
            trace = contraction_trace(task, alpha, rng.normal(size=4), steps=25)
            rho = closed_form_rho(mu, beta, alpha)
            limit = rho ** np.arange(trace.size) * trace[0] * (1 + 1e-8)
            self.assertTrue(np.all(trace <= limit))

    def test_alpha_for_rho(self):
        self.assertAlmostEqual(closed_form_rho(1.0, 2.0, alpha_for_rho(1.0, 2.0, 0.5)), 0.5)
        # 1/3 is the best modulus on [1, 2]
        self.assertAlmostEqual(closed_form_rho(1.0, 2.0, alpha_for_rho(1.0, 2.0, 0.1)), 1 / 3)

    def test_quadratic_gradient_is_beta_lipschitz(self):
        rng = make_rng(6)
        task = QuadTask(center=np.zeros(5), curvature=random_spectrum(5, 0.3, 2.5, rng))
        self.assertLessEqual(gradient_lipschitz_ratio(task, rng), 2.5 * (1 + 1e-12))


class ComparatorTests(SimpleTestCase):
    def test_quadratic_comparator_is_center(self):
        task = QuadTask(center=[1.5, -2.0], curvature=[1.0, 3.0])
        comparator = compute_comparator(task)
        np.testing.assert_array_equal(comparator.params, task.center)
        self.assertEqual(comparator.residual_loss, 0.0)

    def test_unknown_task_type(self):
        with self.assertRaises(ArgumentError):
            compute_comparator("not a task")

    def test_neural_comparator_on_separable_task(self):
        domain = DomainSpec(0, (0.0,) * 4, 3.0, 0.1, 3, is_pretrain=True)
        task = sample_task(domain, make_rng(7))
        cfg = TheoryConfig.for_classes(3)
        first = compute_comparator(task, NET, cfg, make_rng(8), sigma=0.1)
        second = compute_comparator(task, NET, cfg, make_rng(8), sigma=0.1)
        self.assertLess(first.residual_loss, 1e-2)
        self.assertTrue(first.converged)
        self.assertEqual(first.params.values.tobytes(), second.params.values.tobytes())

    def test_unconverged_comparator_warns(self):
        domain = default_domains(4, 3)[2]
        task = sample_task(domain, make_rng(9))
        cfg = TheoryConfig.for_classes(3, comparator_max_steps=1)
        with self.assertLogs("apps.theory.regret", "WARNING"):
            comparator = compute_comparator(task, NET, cfg, make_rng(10), sigma=1.0)
        self.assertFalse(comparator.converged)


class RegretAccountingTests(SimpleTestCase):
    def test_single_step_hand_value(self):
        self.assertEqual(regret_from_losses([[1.0]], [[0.25]]), [0.75])

    def test_step_count_mismatch(self):
        with self.assertRaises(ArgumentError):
            regret_from_losses([[1.0, 0.5]], [[0.25]])

    def run_single_step_tasks(self, n_steps=30):
        scfg = StreamConfig(
            p_stay=1e-9,
            eta_ind=0.5,
            domains=default_domains(4, 3),
            n_shot=2,
            n_query=2,
            seed=3,
        )
        state = LearnerState(meta=init_params(NET, make_rng(0)), det=DET, mode=LearnerMode.LEEDS)
        return run_stream(
            state, scfg, n_steps, NET, HP, make_rng(3, RngPurpose.STREAM), keep_params=True
        )

    def test_own_parameters_give_zero_regret(self):
        record = self.run_single_step_tasks()
        comparators = [record.online_params[steps[0]] for steps in record.segments()]
        self.assertEqual(len(comparators), len(record))

        report = task_averaged_regret(record, comparators, NET)
        self.assertEqual(report.tar, 0.0)
        self.assertEqual(report.n_tasks, len(record))
        self.assertEqual(len(report.initial_gaps), len(record))

    def test_comparator_count_must_match_segments(self):
        record = self.run_single_step_tasks(5)
        with self.assertRaises(ArgumentError):
            task_averaged_regret(record, record.online_params[:2], NET)


class TheoryRunTests(SimpleTestCase):
    def test_one_step_convergence_regret_is_first_gap(self):
        fam = one_dim_family(centers=[2.0, -1.0], ks=[3, 2])
        report = theory_run(fam)
        self.assertEqual(fam.rho, 0.0)
        self.assertEqual(report.per_task_regret, [2.0, 4.5])
        self.assertEqual(report.initial_gaps, report.per_task_regret)
        self.assertEqual(report.tar, 3.25)

    def test_tar_is_mean_of_per_task_regret(self):
        fam = make_quad_family(3, 15, 1.0, make_rng(11))
        report = theory_run(fam)
        self.assertAlmostEqual(report.tar, float(np.mean(report.per_task_regret)), delta=1e-12)

    def test_exact_comparators_give_nonnegative_regret(self):
        for seed in range(5):
            report = theory_run(make_quad_family(6, 40, 2.0, make_rng(seed)))
            self.assertGreaterEqual(min(report.per_task_regret), -1e-10)

    def test_tar_within_distance_bound(self):
        report = theory_run(make_quad_family(6, 40, 1.0, make_rng(12)))
        self.assertLessEqual(report.tar, report.distance_bound)
        self.assertTrue(math.isnan(report.detection_error_rate))

    def test_init_shape(self):
        with self.assertRaises(ArgumentError):
            theory_run(make_quad_family(3, 2, 1.0, make_rng(13)), init=np.zeros(2))

    def test_noiseless_detector_finds_far_boundary(self):
        fam = one_dim_family(centers=[0.0, 10.0], ks=[2, 2])
        cfg = TheoryConfig(M_clip=100.0, ell_m=1.0, ell_p=10.0)
        report = theory_run(fam, detector_on=True, rng=make_rng(14), support_size=4, cfg=cfg)
        self.assertEqual(report.detection_error_rate, 0.0)
        self.assertEqual(report.tar, 25.0)

    def test_noiseless_detector_misses_near_boundary(self):
        fam = one_dim_family(centers=[0.0, 1.0], ks=[2, 2])
        cfg = TheoryConfig(M_clip=100.0, ell_m=1.0, ell_p=10.0)
        report = theory_run(fam, detector_on=True, rng=make_rng(15), support_size=4, cfg=cfg)
        self.assertAlmostEqual(report.detection_error_rate, 1 / 3)
        self.assertEqual(report.tar, 0.25)

    def test_detector_needs_generator(self):
        with self.assertRaises(ArgumentError):
            theory_run(one_dim_family([0.0], [1]), detector_on=True)

    def test_calibration_needs_new_tasks(self):
        with self.assertRaises(RegimeError):
            theory_run(
                one_dim_family([0.0], [5], noise_sigma=0.1), detector_on=True, rng=make_rng(16)
            )

    def test_zero_variance_regret_decays(self):
        def build(rng):
            return make_quad_family(4, 200, 0.0, rng, base_center=np.full(4, 3.0))

        short = seed_average(build, 20)
        long = seed_average(build, 200)
        self.assertEqual(short.sigma_star_sq, 0.0)
        self.assertLess(long.tar, 0.5 * short.tar)

    def test_regret_plateaus_with_spread_centers(self):
        def build(rng):
            return make_quad_family(8, 400, 1.0, rng)

        first = seed_average(build, 200)
        second = seed_average(build, 400)
        self.assertGreater(first.sigma_star_sq, 0.0)
        self.assertLess(abs(second.tar - first.tar), 0.1 * first.tar)

    @tag("slow")
    def test_spread_trades_regret_against_detection(self):
        cfg = TheoryConfig(M_clip=50.0)
        tars, errors = [], []
        for spread in (0.5, 1.0, 2.0):

            def build(rng, spread=spread):
                return make_quad_family(8, 200, spread, rng, noise_sigma=0.3)

            report = seed_average(build, 200, detector_on=True, support_size=32, cfg=cfg)
            tars.append(report.tar)
            errors.append(report.detection_error_rate)
        self.assertTrue(np.all(np.diff(tars) > 0), tars)
        self.assertTrue(np.all(np.diff(errors) < 0), errors)


class DetectionErrorTests(SimpleTestCase):
    def test_levels_from_percentiles(self):
        same_task, new_task = np.linspace(0.0, 1.0, 101), np.linspace(2.0, 3.0, 101)
        cfg = levels_from_losses(same_task, new_task, TheoryConfig())
        self.assertAlmostEqual(cfg.ell_m, 0.95)
        self.assertAlmostEqual(cfg.ell_p, 2.05)

    def test_overlapping_levels_are_a_regime_error(self):
        with self.assertRaises(RegimeError):
            levels_from_losses([0.5, 1.5], [0.6, 1.0], TheoryConfig())

    def degenerate_stream(self):
        return StreamConfig(
            p_stay=1 - 1e-12,
            eta_ind=0.5,
            domains=default_domains(4, 3),
            n_shot=2,
            n_query=2,
        )

    def test_single_task_stream_only_false_alarms(self):
        cfg = TheoryConfig.for_classes(3).with_levels(0.5, 1.5)
        theta = init_params(NET, make_rng(17))
        with self.assertLogs("apps.theory.bounds", "WARNING"):
            report = empirical_detection_error(
                self.degenerate_stream(), DET, theta, 8, 200, make_rng(18), NET, HP, cfg
            )
        self.assertEqual(report.misses, 0)
        self.assertEqual(report.rate, report.false_alarms / 200)
        self.assertEqual(report.threshold, 1.0)

    def test_single_task_stream_cannot_calibrate(self):
        cfg = TheoryConfig.for_classes(3, calibration_episodes=50)
        theta = init_params(NET, make_rng(19))
        with self.assertRaises(RegimeError):
            empirical_detection_error(
                self.degenerate_stream(), DET, theta, 8, 1000, make_rng(20), NET, HP, cfg
            )


@tag("slow")
class PretrainedDetectionTests(SimpleTestCase):
    def stream(self, sigma=None):
        domains = default_domains(8, 5)
        if sigma is not None:
            domains = tuple(replace(d, sample_noise_sigma=sigma) for d in domains)
        return StreamConfig(p_stay=0.9, eta_ind=0.5, domains=domains, n_shot=5, n_query=5)

    def test_detection_error_below_hoeffding_bound(self):
        net, hp, _, theta = pretrained_theta()
        det = DetectorParams(ell=default_ell(5), tau=-math.inf)
        service = TheoryReportService()
        service.detection_trials = 10_000
        service.support_grid = (4, 8, 16, 32)
        checks = service.hoeffding_checks(
            self.stream(), det, theta, net, hp, TheoryConfig.for_classes(5)
        )
        if len(checks) == 1 and math.isnan(checks[0].measured):
            self.skipTest(checks[0].detail)
        for check in checks:
            self.assertTrue(check.passed, check)

    def test_well_separated_stream_rarely_errs(self):
        net, hp, _, theta = pretrained_theta()
        det = DetectorParams(ell=default_ell(5), tau=-math.inf)
        report = empirical_detection_error(
            self.stream(sigma=0.01), det, theta, 16, 2000, make_rng(21), net, hp
        )
        self.assertLessEqual(report.rate, 0.01)


class ReportServiceTests(SimpleTestCase):
    def test_contraction_checks_pass(self):
        checks = TheoryReportService().contraction_checks(make_rng(22), n_quads=10)
        self.assertEqual(
            [check.name for check in checks],
            ["contraction_closed_form", "contraction_chaining", "quadratic_smoothness"],
        )
        self.assertTrue(all(check.passed for check in checks))

    def test_payload_replaces_nan(self):
        service = TheoryReportService()
        checks = service.contraction_checks(make_rng(23), n_quads=2)
        payload = service.to_payload(checks)
        self.assertTrue(payload["passed"])
        self.assertEqual(len(payload["checks"]), 3)

    @tag("slow")
    def test_quadratic_checks_pass(self):
        service = TheoryReportService()
        checks = service.tar_checks() + service.tradeoff_checks()
        for check in checks:
            self.assertTrue(check.passed, check)
