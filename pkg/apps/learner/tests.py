import math
import numpy as np
from django.test import SimpleTestCase, tag
from scipy import stats

from apps.detect.detectors import DetectorParams, default_ell, switch_detect
from apps.netcore.exceptions import ArgumentError, ConfigurationError
from apps.netcore.network import LabeledBatch, NetConfig, ParamSet, init_params
from apps.stream.generators import (
    DomainSpec,
    Episode,
    StreamConfig,
    TaskBatch,
    TaskSpec,
    default_domains,
    sample_batch,
    sample_task,
)
from apps.stream.rng import RngPurpose, make_rng

from .services.online_service import baseline_step, leeds_step, run_stream
from .services.pretrain_service import adapt, evaluate_adaptation, pretrain_maml
from .testing import pretrained_theta
from .types import Branch, Hyperparams, LearnerMode, LearnerState

NET = NetConfig(input_dim=4, hidden_dims=(8,), n_classes=3, activation="tanh")
HP = Hyperparams(alpha1=0.5, alpha2=0.05, pretrain_tasks=0)
DET = DetectorParams(ell=default_ell(3), tau=0.0)


def small_stream(seed=0, p_stay=0.8):
    return StreamConfig(
        p_stay=p_stay,
        eta_ind=0.5,
        domains=default_domains(NET.input_dim, NET.n_classes),
        n_shot=3,
        n_query=3,
        seed=seed,
    )


def initial_state(mode=LearnerMode.LEEDS, det=DET, seed=0):
    return LearnerState(meta=init_params(NET, make_rng(seed, RngPurpose.INIT)), det=det, mode=mode)


def run(mode, hp=HP, n_steps=150, det=DET, **kwargs):
    scfg = small_stream()
    return run_stream(
        initial_state(mode, det),
        scfg,
        n_steps,
        NET,
        hp,
        make_rng(scfg.seed, RngPurpose.STREAM),
        **kwargs,
    )


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def logistic_grad(values, x, label):
    """Gradient of the 2-class, 2-feature linear net's loss on one point, by hand."""
    weights = values[:4].reshape(2, 2)
    p = softmax(x @ weights + values[4:])
    residual = p - np.eye(2)[label]
    return np.concatenate([np.outer(x, residual).ravel(), residual])


class HandComputedStepTests(SimpleTestCase):
    def setUp(self):
        self.net = NetConfig(input_dim=2, hidden_dims=(), n_classes=2)
        self.hp = Hyperparams(alpha1=0.5, alpha2=0.25)
        self.theta = np.array([0.3, -0.2, 0.1, 0.4, 0.05, -0.05])
        self.phi = np.array([-0.1, 0.6, 0.2, -0.3, 0.0, 0.1])
        self.xs, self.ys = np.array([1.0, 2.0]), 0
        self.xq, self.yq = np.array([0.5, -1.0]), 1
        batch = TaskBatch(
            support=LabeledBatch(inputs=[self.xs], labels=[self.ys]),
            query=LabeledBatch(inputs=[self.xq], labels=[self.yq]),
        )
        task = TaskSpec(domain_id=1, prototypes=np.eye(2), task_uid=0)
        self.episode = Episode(batch, False, 1, 1, 1, task)

    def state(self, tau, ell, online=True):
        return LearnerState(
            meta=ParamSet(values=self.theta, shape_spec=self.net.dims),
            online=ParamSet(values=self.phi, shape_spec=self.net.dims) if online else None,
            det=DetectorParams(ell=ell, tau=tau),
        )

    def expected_meta(self):
        adapted = self.theta - 0.5 * logistic_grad(self.theta, self.xs, self.ys)
        return adapted, self.theta - 0.25 * logistic_grad(adapted, self.xq, self.yq)

    def test_switch_branch(self):
        state, outcome = leeds_step(self.state(tau=0.0, ell=1e-9), self.episode, self.net, self.hp)
        adapted, meta = self.expected_meta()
        self.assertEqual(outcome.branch, Branch.SWITCH)
        np.testing.assert_allclose(state.online.values, adapted, rtol=0, atol=1e-10)
        np.testing.assert_allclose(state.meta.values, meta, rtol=0, atol=1e-10)

    def test_first_step_forces_switch(self):
        state, outcome = leeds_step(
            self.state(tau=0.0, ell=1e6, online=False), self.episode, self.net, self.hp
        )
        self.assertTrue(outcome.detected_switch)
        np.testing.assert_allclose(state.online.values, self.expected_meta()[0], atol=1e-10)

    def test_no_switch_shifted_branch(self):
        state, outcome = leeds_step(
            self.state(tau=math.inf, ell=1e6), self.episode, self.net, self.hp
        )
        self.assertEqual(outcome.branch, Branch.NO_SWITCH_OOD)
        online = self.phi - 0.5 * logistic_grad(self.phi, self.xs, self.ys)
        np.testing.assert_allclose(state.online.values, online, rtol=0, atol=1e-10)
        np.testing.assert_allclose(state.meta.values, self.expected_meta()[1], atol=1e-10)

    def test_no_switch_in_distribution_keeps_meta(self):
        start = self.state(tau=-math.inf, ell=1e6)
        state, outcome = leeds_step(start, self.episode, self.net, self.hp)
        self.assertEqual(outcome.branch, Branch.NO_SWITCH_IND)
        self.assertEqual(state.meta.values.tobytes(), start.meta.values.tobytes())

    def test_online_ignores_meta_without_switch(self):
        start = self.state(tau=-math.inf, ell=1e6)
        perturbed = LearnerState(
            meta=start.meta.with_values(self.theta + 3.0), online=start.online, det=start.det
        )
        first, _ = leeds_step(start, self.episode, self.net, self.hp)
        second, _ = leeds_step(perturbed, self.episode, self.net, self.hp)
        self.assertEqual(first.online.values.tobytes(), second.online.values.tobytes())

    def test_zero_step_sizes_leave_parameters(self):
        hp = Hyperparams(alpha1=0.0, alpha2=0.0)
        start = self.state(tau=math.inf, ell=1e-9)
        state, outcome = leeds_step(start, self.episode, self.net, hp)
        np.testing.assert_array_equal(state.meta.values, self.theta)
        np.testing.assert_array_equal(state.online.values, self.theta)
        self.assertGreater(outcome.query_loss, 0.0)
        self.assertGreater(outcome.support_loss, 0.0)


class LearnerStateTests(SimpleTestCase):
    def test_unknown_mode(self):
        with self.assertRaises(ConfigurationError):
            initial_state(mode="replay")

    def test_layout_mismatch(self):
        other = NetConfig(input_dim=2, hidden_dims=(), n_classes=3)
        with self.assertRaises(ConfigurationError):
            LearnerState(
                meta=init_params(NET, make_rng(0)), online=init_params(other, make_rng(0)), det=DET
            )

    def test_hyperparams_reject_negative_rate(self):
        with self.assertRaises(ConfigurationError):
            Hyperparams(alpha1=-0.1)


class RunStreamTests(SimpleTestCase):
    def test_single_step(self):
        record = run(LearnerMode.LEEDS, n_steps=1)
        self.assertEqual(len(record), 1)
        self.assertTrue(record.outcomes[0].truth_switched)
        self.assertTrue(record.outcomes[0].detected_switch)

    def test_rejects_empty_run(self):
        with self.assertRaises(ArgumentError):
            run(LearnerMode.LEEDS, n_steps=0)

    def test_identical_seeds_identical_records(self):
        first = run(LearnerMode.LEEDS, keep_params=True)
        second = run(LearnerMode.LEEDS, keep_params=True)
        self.assertEqual(first.outcomes, second.outcomes)
        self.assertEqual(
            first.final_state.meta.values.tobytes(), second.final_state.meta.values.tobytes()
        )

    def test_branches_are_exclusive(self):
        record = run(LearnerMode.LEEDS, n_steps=200)
        self.assertEqual(sum(record.branch_counts().values()), 200)

    def test_task_starts_follow_truth(self):
        record = run(LearnerMode.LEEDS)
        switches = [o.step_index for o in record.outcomes if o.truth_switched]
        self.assertEqual([s.step_index for s in record.task_starts], switches)
        self.assertEqual(len(record.segments()), len(switches))

    def test_oracle_meta_moves_once_per_in_distribution_task(self):
        record = run(LearnerMode.LEEDS, n_steps=300, oracle=True, keep_params=True)
        scfg = small_stream()
        previous = [initial_state().meta, *record.meta_params]
        moved = [
            not np.array_equal(previous[step].values, record.meta_params[step].values)
            for step in range(len(record))
        ]
        shifted_moves = []
        for steps in record.segments():
            changes = sum(moved[step] for step in steps)
            if scfg.is_pretrain(record.outcomes[steps[0]].truth_domain_id):
                self.assertLessEqual(changes, 1, f"segment starting at {steps[0]}")
            elif len(steps) > 1:
                shifted_moves.append(changes)
        self.assertTrue(any(changes > 1 for changes in shifted_moves))

    def test_sink_sees_every_episode(self):
        seen = []
        run(LearnerMode.META_OGD, n_steps=20, sink=lambda ep, out: seen.append(out.step_index))
        self.assertEqual(seen, list(range(20)))

    def test_stream_must_match_network(self):
        wrong = NetConfig(input_dim=4, hidden_dims=(8,), n_classes=5)
        state = LearnerState(meta=init_params(wrong, make_rng(0)), det=DET)
        with self.assertRaises(ConfigurationError):
            run_stream(state, small_stream(), 5, wrong, HP, make_rng(0))


class BaselineTests(SimpleTestCase):
    def test_maml_reset_never_moves_meta(self):
        record = run(LearnerMode.MAML_RESET, n_steps=300)
        initial = initial_state().meta
        self.assertEqual(record.final_state.meta.values.tobytes(), initial.values.tobytes())
        self.assertTrue(all(o.branch is Branch.SWITCH for o in record.outcomes))

    def test_meta_ogd_without_meta_rate_is_maml_reset(self):
        frozen = Hyperparams(alpha1=HP.alpha1, alpha2=0.0, pretrain_tasks=0)
        reset = run(LearnerMode.MAML_RESET)
        ogd = run(LearnerMode.META_OGD, hp=frozen)
        self.assertEqual(reset.outcomes, ogd.outcomes)

    def test_cmaml_with_unbounded_gamma_updates_every_step(self):
        hp = Hyperparams(
            alpha1=HP.alpha1, alpha2=HP.alpha2, pretrain_tasks=0, cmaml_gamma=-math.inf
        )
        cmaml = run(LearnerMode.CMAML_DETECT, hp=hp)
        ogd = run(LearnerMode.META_OGD, hp=hp)
        self.assertTrue(all(o.detected_switch for o in cmaml.outcomes))
        self.assertEqual(
            [(o.query_loss, o.query_accuracy) for o in cmaml.outcomes],
            [(o.query_loss, o.query_accuracy) for o in ogd.outcomes],
        )
        self.assertEqual(
            cmaml.final_state.meta.values.tobytes(), ogd.final_state.meta.values.tobytes()
        )

    def test_no_domain_adaptation_never_flags_shift(self):
        det = DetectorParams(ell=default_ell(3), tau=math.inf)
        record = run(LearnerMode.LEEDS_NO_DA, det=det)
        self.assertFalse(any(o.detected_ood for o in record.outcomes))
        self.assertEqual(record.branch_counts()[Branch.NO_SWITCH_OOD], 0)

    def test_baseline_step_dispatches_leeds_modes(self):
        record = run(LearnerMode.LEEDS, n_steps=1)
        state = initial_state(LearnerMode.LEEDS)
        _, outcome = baseline_step(state, record.episodes[0], NET, HP)
        self.assertEqual(outcome, record.outcomes[0])


class OracleTests(SimpleTestCase):
    """A linear net whose energy score separates far-apart domains exactly."""

    def setUp(self):
        self.net = NetConfig(input_dim=2, hidden_dims=(), n_classes=2)
        self.scfg = StreamConfig(
            p_stay=1e-9,
            eta_ind=0.5,
            domains=(
                DomainSpec(0, (50.0, 0.0), 1.0, 0.1, 2, is_pretrain=True),
                DomainSpec(1, (0.0, 0.0), 1.0, 0.1, 2),
            ),
            n_shot=3,
            n_query=3,
            seed=4,
        )
        self.state = LearnerState(
            meta=ParamSet(values=[1.0, -1.0, 0.0, 0.0, 0.0, 0.0], shape_spec=self.net.dims),
            det=DetectorParams(ell=1e-3, tau=10.0),
        )
        self.hp = Hyperparams(alpha1=0.01, alpha2=0.0)

    def run_once(self, oracle):
        rng = make_rng(self.scfg.seed, RngPurpose.STREAM)
        return run_stream(self.state, self.scfg, 200, self.net, self.hp, rng, oracle=oracle)

    def test_correct_detectors_match_oracle(self):
        learned, oracle = self.run_once(oracle=False), self.run_once(oracle=True)
        for outcome in learned.outcomes:
            self.assertEqual(outcome.detected_switch, outcome.truth_switched)
            self.assertEqual(outcome.detected_ood, outcome.truth_domain_id == 1)
        self.assertEqual(learned.outcomes, oracle.outcomes)


class PretrainTests(SimpleTestCase):
    def test_zero_tasks_returns_initialisation(self):
        domain = default_domains(NET.input_dim, NET.n_classes)[0]
        init = init_params(NET, make_rng(1))
        theta = pretrain_maml(domain, NET, HP, make_rng(2), init=init)
        self.assertIs(theta, init)

    def test_rejects_shifted_domain(self):
        domain = default_domains(NET.input_dim, NET.n_classes)[1]
        with self.assertRaises(ConfigurationError):
            pretrain_maml(domain, NET, HP, make_rng(3))

    def test_short_run_is_deterministic(self):
        domain = default_domains(NET.input_dim, NET.n_classes)[0]
        hp = Hyperparams(alpha1=0.5, alpha2=0.05, pretrain_tasks=20, pretrain_meta_batch=3)
        first = pretrain_maml(domain, NET, hp, make_rng(4))
        second = pretrain_maml(domain, NET, hp, make_rng(4))
        self.assertEqual(first.values.tobytes(), second.values.tobytes())

    @tag("slow")
    def test_adapted_accuracy(self):
        net, hp, domain, theta = pretrained_theta()
        _, adapted = evaluate_adaptation(theta, domain, net, hp, make_rng(5), n_tasks=100)
        self.assertGreaterEqual(adapted.mean(), 0.95)

    @tag("slow")
    def test_adaptation_beats_zero_shot(self):
        net, hp, domain, theta = pretrained_theta()
        zero_shot, adapted = evaluate_adaptation(theta, domain, net, hp, make_rng(6), n_tasks=100)
        wins = int(np.sum(adapted > zero_shot))
        losses = int(np.sum(adapted < zero_shot))
        result = stats.binomtest(wins, wins + losses, 0.5, alternative="greater")
        self.assertLess(result.pvalue, 0.01)

    @tag("slow")
    def test_switch_loss_margin(self):
        net, hp, _, theta = pretrained_theta()
        domain = DomainSpec(0, (0.0,) * 8, 3.0, 0.1, 5, is_pretrain=True)
        rng = make_rng(7)
        same, other = [], []
        for _ in range(200):
            task_a, task_b = sample_task(domain, rng), sample_task(domain, rng)
            phi = adapt(theta, net, sample_batch(task_a, 5, 1, 0.1, rng), hp.alpha1, steps=3)
            for task, losses in ((task_a, same), (task_b, other)):
                support = sample_batch(task, 5, 1, 0.1, rng).support
                losses.append(switch_detect(phi, net, support, ell=1.0)[1])
        self.assertLess(np.mean(same), 0.2)
        self.assertGreater(np.mean(other), 0.8 * math.log(5))
