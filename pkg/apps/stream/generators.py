"""
Non-stationary few-shot episode stream.

Tasks are Gaussian-prototype classification problems: each class owns a
prototype drawn on a sphere around its domain's centre, samples are the
prototype plus isotropic Gaussian noise. The stream is a Markov chain over
tasks: stay on the current task with probability ``p_stay``, otherwise draw a
fresh task from a pretrain domain with probability ``eta_ind`` or from one of
the shifted domains uniformly.
"""

from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import pdist

from apps.netcore.exceptions import ConfigurationError, GenerationError
from apps.netcore.network import LabeledBatch

from .rng import RngPurpose, make_rng

MAX_PROTOTYPE_TRIES = 1000
MIN_PROTOTYPE_DISTANCE = 1e-6


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    prototype_center: tuple[float, ...]
    prototype_radius: float
    sample_noise_sigma: float
    n_ways: int
    is_pretrain: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(
            self, "prototype_center", tuple(float(c) for c in self.prototype_center)
        )
        if self.prototype_radius <= 0:
            raise ConfigurationError(f"Domain {self.domain_id}: radius must be > 0.")
        if self.sample_noise_sigma <= 0:
            raise ConfigurationError(f"Domain {self.domain_id}: sigma must be > 0.")
        if self.n_ways < 2:
            raise ConfigurationError(f"Domain {self.domain_id}: n_ways must be >= 2.")

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.prototype_center, dtype=np.float64)

    @property
    def dim(self) -> int:
        return len(self.prototype_center)

    @property
    def label(self) -> str:
        return self.name or f"domain{self.domain_id}"


@dataclass(frozen=True, eq=False)
class TaskSpec:
    domain_id: int
    prototypes: np.ndarray
    task_uid: int

    @property
    def n_ways(self) -> int:
        return self.prototypes.shape[0]


@dataclass(frozen=True)
class StreamConfig:
    p_stay: float
    eta_ind: float
    domains: tuple[DomainSpec, ...]
    n_shot: int
    n_query: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        for name in ("p_stay", "eta_ind"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigurationError(f"{name} must lie strictly inside (0, 1), got {value}.")
        if self.n_shot < 1 or self.n_query < 1:
            raise ConfigurationError("n_shot and n_query must be >= 1.")
        if self.seed < 0:
            raise ConfigurationError("seed must be an unsigned integer.")
        if not self.pretrain_domains:
            raise ConfigurationError("At least one domain must have is_pretrain=true.")
        if not self.shifted_domains:
            raise ConfigurationError(
                "At least one non-pretrain domain is required: eta_ind < 1 makes the "
                "shifted branch reachable."
            )
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("Domain ids must be unique.")
        if len({d.n_ways for d in self.domains}) != 1 or len({d.dim for d in self.domains}) != 1:
            raise ConfigurationError("All domains must share n_ways and centre dimension.")

    @property
    def pretrain_domains(self) -> tuple[DomainSpec, ...]:
        return tuple(d for d in self.domains if d.is_pretrain)

    @property
    def shifted_domains(self) -> tuple[DomainSpec, ...]:
        return tuple(d for d in self.domains if not d.is_pretrain)

    @property
    def n_ways(self) -> int:
        return self.domains[0].n_ways

    def domain(self, domain_id: int) -> DomainSpec:
        for candidate in self.domains:
            if candidate.domain_id == domain_id:
                return candidate
        raise ConfigurationError(f"Unknown domain id {domain_id}.")

    def is_pretrain(self, domain_id: int) -> bool:
        return self.domain(domain_id).is_pretrain


@dataclass(frozen=True, eq=False)
class TaskBatch:
    support: LabeledBatch
    query: LabeledBatch


@dataclass(frozen=True, eq=False)
class Episode:
    batch: TaskBatch
    truth_switched: bool
    truth_domain_id: int
    step_index: int
    within_task_index: int
    task: TaskSpec = field(repr=False)


@dataclass(frozen=True, eq=False)
class StreamState:
    task: TaskSpec | None = None
    step_index: int = 0
    within_task_index: int = 0
    next_task_uid: int = 0


def default_domains(input_dim: int, n_ways: int) -> tuple[DomainSpec, ...]:
    """In-distribution domain plus a near and a far shifted domain."""
    if input_dim < 2:
        raise ConfigurationError("Default domains need input_dim >= 2.")

    def axis(i: int, value: float) -> tuple[float, ...]:
        center = [0.0] * input_dim
        center[i] = value
        return tuple(center)

    return (
        DomainSpec(0, (0.0,) * input_dim, 3.0, 0.5, n_ways, is_pretrain=True, name="pretrain"),
        DomainSpec(1, axis(0, 6.0), 3.0, 0.5, n_ways, name="ood1"),
        DomainSpec(2, axis(1, 6.0), 1.5, 1.0, n_ways, name="ood2"),
    )


def sample_task(domain: DomainSpec, rng: np.random.Generator, task_uid: int = 0) -> TaskSpec:
    """Draw ``n_ways`` prototypes uniformly on the sphere around the domain centre."""
    for _ in range(MAX_PROTOTYPE_TRIES):
        directions = rng.normal(size=(domain.n_ways, domain.dim))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            continue
        prototypes = domain.center + domain.prototype_radius * directions / norms
        if pdist(prototypes).min() > MIN_PROTOTYPE_DISTANCE:
            prototypes.setflags(write=False)
            return TaskSpec(domain_id=domain.domain_id, prototypes=prototypes, task_uid=task_uid)

    raise GenerationError(
        f"Could not draw {domain.n_ways} distinct prototypes for domain {domain.domain_id} "
        f"after {MAX_PROTOTYPE_TRIES} tries."
    )


def sample_points(
    task: TaskSpec, labels: Sequence[int], sigma: float, rng: np.random.Generator
) -> LabeledBatch:
    labels = np.asarray(labels, dtype=np.int64)
    noise = rng.normal(size=(labels.size, task.prototypes.shape[1]))
    return LabeledBatch(inputs=task.prototypes[labels] + sigma * noise, labels=labels)


def balanced_labels(n_ways: int, per_class: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.repeat(np.arange(n_ways), per_class))


def sample_batch(
    task: TaskSpec, n_shot: int, n_query: int, sigma: float, rng: np.random.Generator
) -> TaskBatch:
    support = sample_points(task, balanced_labels(task.n_ways, n_shot, rng), sigma, rng)
    query = sample_points(task, balanced_labels(task.n_ways, n_query, rng), sigma, rng)
    return TaskBatch(support=support, query=query)


def _draw_domain(cfg: StreamConfig, rng: np.random.Generator) -> DomainSpec:
    pool = cfg.pretrain_domains if rng.random() < cfg.eta_ind else cfg.shifted_domains
    return pool[int(rng.integers(len(pool)))]


def next_episode(
    state: StreamState, cfg: StreamConfig, rng: np.random.Generator
) -> tuple[Episode, StreamState]:
    switched = state.task is None or rng.random() >= cfg.p_stay

    if switched:
        domain = _draw_domain(cfg, rng)
        task = sample_task(domain, rng, task_uid=state.next_task_uid)
        within = 0
        next_uid = state.next_task_uid + 1
    else:
        task = state.task
        domain = cfg.domain(task.domain_id)
        within = state.within_task_index + 1
        next_uid = state.next_task_uid

    batch = sample_batch(task, cfg.n_shot, cfg.n_query, domain.sample_noise_sigma, rng)
    episode = Episode(
        batch=batch,
        truth_switched=switched,
        truth_domain_id=task.domain_id,
        step_index=state.step_index,
        within_task_index=within,
        task=task,
    )
    new_state = replace(
        state,
        task=task,
        step_index=state.step_index + 1,
        within_task_index=within,
        next_task_uid=next_uid,
    )
    return episode, new_state


def iter_episodes(
    cfg: StreamConfig, n_steps: int, rng: np.random.Generator | None = None
) -> Iterator[Episode]:
    rng = rng if rng is not None else make_rng(cfg.seed, RngPurpose.STREAM)
    state = StreamState()
    for _ in range(n_steps):
        episode, state = next_episode(state, cfg, rng)
        yield episode


def segment_lengths(switch_flags: Sequence[bool]) -> list[int]:
    """Lengths of the runs delimited by switch flags (the first flag opens a segment)."""
    lengths: list[int] = []
    for flag in switch_flags:
        if flag or not lengths:
            lengths.append(1)
        else:
            lengths[-1] += 1
    return lengths
