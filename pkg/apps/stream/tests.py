import numpy as np
from django.test import SimpleTestCase, tag
from scipy import stats

from apps.netcore.exceptions import ConfigurationError, GenerationError

from .generators import (
    DomainSpec,
    StreamConfig,
    StreamState,
    TaskSpec,
    default_domains,
    iter_episodes,
    next_episode,
    sample_batch,
    sample_task,
    segment_lengths,
)
from .rng import RngPurpose, make_rng


def stream_config(p_stay=0.9, eta_ind=0.5, seed=0, input_dim=8, n_ways=5):
    return StreamConfig(
        p_stay=p_stay,
        eta_ind=eta_ind,
        domains=default_domains(input_dim, n_ways),
        n_shot=5,
        n_query=5,
        seed=seed,
    )


class RngTests(SimpleTestCase):
    def test_same_keys_same_draws(self):
        first = make_rng(7, RngPurpose.STREAM).random(5)
        second = make_rng(7, RngPurpose.STREAM).random(5)
        np.testing.assert_array_equal(first, second)

    def test_purposes_are_independent_streams(self):
        stream = make_rng(7, RngPurpose.STREAM).random(5)
        pretrain = make_rng(7, RngPurpose.PRETRAIN).random(5)
        self.assertFalse(np.array_equal(stream, pretrain))


class DomainValidationTests(SimpleTestCase):
    def test_rejects_non_positive_radius(self):
        with self.assertRaises(ConfigurationError):
            DomainSpec(0, (0.0, 0.0), 0.0, 0.5, 3, is_pretrain=True)

    def test_rejects_non_positive_sigma(self):
        with self.assertRaises(ConfigurationError):
            DomainSpec(0, (0.0, 0.0), 1.0, 0.0, 3, is_pretrain=True)

    def test_probabilities_must_be_open_interval(self):
        for p_stay in (0.0, 1.0):
            with self.assertRaises(ConfigurationError):
                stream_config(p_stay=p_stay)

    def test_requires_shifted_domain(self):
        pretrain_only = default_domains(4, 3)[:1]
        with self.assertRaises(ConfigurationError):
            StreamConfig(p_stay=0.9, eta_ind=0.5, domains=pretrain_only, n_shot=1, n_query=1)

    def test_requires_pretrain_domain(self):
        with self.assertRaises(ConfigurationError):
            StreamConfig(
                p_stay=0.9, eta_ind=0.5, domains=default_domains(4, 3)[1:], n_shot=1, n_query=1
            )


class SampleTaskTests(SimpleTestCase):
    def setUp(self):
        self.domain = DomainSpec(0, (0.0,) * 8, 3.0, 0.5, 5, is_pretrain=True)

    def test_prototypes_on_sphere(self):
        task = sample_task(self.domain, make_rng(1))
        np.testing.assert_allclose(np.linalg.norm(task.prototypes, axis=1), 3.0, atol=1e-9)

    def test_deterministic(self):
        first = sample_task(self.domain, make_rng(2))
        second = sample_task(self.domain, make_rng(2))
        np.testing.assert_array_equal(first.prototypes, second.prototypes)

    def test_angles_uniform(self):
        domain = DomainSpec(0, (0.0, 0.0), 1.0, 0.5, 4, is_pretrain=True)
        rng = make_rng(3)
        prototypes = np.vstack([sample_task(domain, rng).prototypes for _ in range(2500)])
        angles = np.arctan2(prototypes[:, 1], prototypes[:, 0])
        result = stats.kstest(angles, stats.uniform(loc=-np.pi, scale=2 * np.pi).cdf)
        self.assertGreater(result.pvalue, 0.01)

    def test_exhausted_rejection_sampling(self):
        # a 1-d sphere has only two points, so three distinct prototypes never exist
        domain = DomainSpec(0, (0.0,), 1.0, 0.5, 3, is_pretrain=True)
        with self.assertRaises(GenerationError):
            sample_task(domain, make_rng(4))


class SampleBatchTests(SimpleTestCase):
    def setUp(self):
        domain = DomainSpec(0, (0.0,) * 3, 3.0, 0.5, 4, is_pretrain=True)
        self.task = sample_task(domain, make_rng(5))

    def test_zero_sigma_returns_prototypes(self):
        batch = sample_batch(self.task, 3, 2, 0.0, make_rng(6))
        for split in (batch.support, batch.query):
            np.testing.assert_array_equal(split.inputs, self.task.prototypes[split.labels])

    def test_balanced_labels(self):
        batch = sample_batch(self.task, 5, 3, 0.5, make_rng(7))
        self.assertEqual(len(batch.support), 20)
        np.testing.assert_array_equal(np.bincount(batch.support.labels), [5, 5, 5, 5])
        np.testing.assert_array_equal(np.bincount(batch.query.labels), [3, 3, 3, 3])

    def test_class_mean_within_clt_bound(self):
        task = TaskSpec(domain_id=0, prototypes=np.array([[1.0, -2.0], [4.0, 4.0]]), task_uid=0)
        batch = sample_batch(task, 10_000, 1, 0.5, make_rng(8))
        rows = batch.support.inputs[batch.support.labels == 0]
        bound = 3 * 0.5 / np.sqrt(rows.shape[0])
        self.assertTrue(np.all(np.abs(rows.mean(axis=0) - task.prototypes[0]) < bound))


class NextEpisodeTests(SimpleTestCase):
    def test_first_step_is_a_switch(self):
        episode, state = next_episode(StreamState(), stream_config(), make_rng(9))
        self.assertTrue(episode.truth_switched)
        self.assertEqual(episode.step_index, 0)
        self.assertEqual(episode.within_task_index, 0)
        self.assertEqual(state.step_index, 1)

    def test_near_certain_stay_keeps_task(self):
        cfg = stream_config(p_stay=1.0 - 1e-12)
        episodes = list(iter_episodes(cfg, 50, make_rng(10)))
        self.assertEqual({e.task.task_uid for e in episodes}, {0})

    def test_within_task_index_counts_up(self):
        episodes = list(iter_episodes(stream_config(), 500))
        for previous, current in zip(episodes, episodes[1:]):
            if current.truth_switched:
                self.assertEqual(current.within_task_index, 0)
            else:
                self.assertEqual(current.within_task_index, previous.within_task_index + 1)
                self.assertIs(current.task, previous.task)

    def test_balanced_every_episode(self):
        for episode in iter_episodes(stream_config(), 50):
            np.testing.assert_array_equal(np.bincount(episode.batch.support.labels), [5] * 5)

    def test_same_seed_reproduces_stream(self):
        first = list(iter_episodes(stream_config(seed=3), 40))
        second = list(iter_episodes(stream_config(seed=3), 40))
        for a, b in zip(first, second):
            self.assertEqual(a.truth_switched, b.truth_switched)
            self.assertEqual(a.batch.support.inputs.tobytes(), b.batch.support.inputs.tobytes())
            self.assertEqual(a.batch.query.inputs.tobytes(), b.batch.query.inputs.tobytes())


@tag("slow")
class StreamStatisticsTests(SimpleTestCase):
    """Markov-chain statistics measured on long low-dimensional streams."""

    def flags_and_domains(self, p_stay, n_steps, seed):
        cfg = StreamConfig(
            p_stay=p_stay,
            eta_ind=0.5,
            domains=default_domains(2, 2),
            n_shot=1,
            n_query=1,
            seed=seed,
        )
        flags, domains = [], []
        for episode in iter_episodes(cfg, n_steps):
            flags.append(episode.truth_switched)
            domains.append(episode.truth_domain_id)
        return np.array(flags), np.array(domains)

    def test_switch_rate(self):
        flags, _ = self.flags_and_domains(0.9, 100_000, seed=11)
        self.assertAlmostEqual(flags[1:].mean(), 0.10, delta=0.006)

    def test_domain_shares(self):
        flags, domains = self.flags_and_domains(0.5, 200_000, seed=12)
        drawn = domains[flags]
        self.assertGreater(drawn.size, 95_000)
        shares = np.bincount(drawn, minlength=3) / drawn.size
        self.assertAlmostEqual(shares[0], 0.5, delta=0.005)
        self.assertAlmostEqual(shares[1], 0.25, delta=0.005)
        self.assertAlmostEqual(shares[2], 0.25, delta=0.005)

    def test_mean_segment_length(self):
        for p_stay in (0.75, 0.9):
            flags, _ = self.flags_and_domains(p_stay, 100_000, seed=13)
            # the last segment is cut off by the horizon
            lengths = segment_lengths(flags)[:-1]
            expected = 1.0 / (1.0 - p_stay)
            self.assertLess(abs(np.mean(lengths) - expected) / expected, 0.05)

    def test_segment_lengths_helper(self):
        self.assertEqual(segment_lengths([True, False, False, True, True, False]), [3, 1, 2])
