import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from functools import singledispatch

import numpy as np

from apps.learner.types import RunRecord
from apps.netcore.exceptions import ArgumentError
from apps.netcore.network import (
    LabeledBatch,
    NetConfig,
    ParamSet,
    ce_loss,
    forward,
    init_params,
    loss_and_grad,
    sgd_step,
)
from apps.stream.generators import Episode, TaskSpec, sample_batch

from .types import QuadTask, RegretReport, TheoryConfig

logger = logging.getLogger(__name__)

COMPARATOR_SAMPLES_PER_SHOT = 20
COMPARATOR_LOSS_TARGET = 0.1


@dataclass(frozen=True, eq=False)
class Comparator:
    params: ParamSet | np.ndarray
    residual_loss: float
    grad_norm: float
    steps: int

    @property
    def converged(self) -> bool:
        return self.residual_loss < COMPARATOR_LOSS_TARGET


@singledispatch
def compute_comparator(task, *args, **kwargs) -> Comparator:
    raise ArgumentError(f"No comparator for task type {type(task).__name__}.")


@compute_comparator.register
def _(task: QuadTask, *args, **kwargs) -> Comparator:
    return Comparator(params=task.center.copy(), residual_loss=0.0, grad_norm=0.0, steps=0)


@compute_comparator.register
def _(
    task: TaskSpec,
    net: NetConfig,
    cfg: TheoryConfig,
    rng: np.random.Generator,
    sigma: float = 0.5,
    n_shot: int = 5,
    init: ParamSet | None = None,
) -> Comparator:
    """Full-batch gradient descent on a large sample of the task."""
    data = sample_batch(task, n_shot * COMPARATOR_SAMPLES_PER_SHOT, 1, sigma, rng).support
    params = init if init is not None else init_params(net, rng)

    loss, grad = loss_and_grad(params, net, data)
    steps = 0
    while np.linalg.norm(grad) >= cfg.comparator_tol and steps < cfg.comparator_max_steps:
        params = sgd_step(params, grad, cfg.comparator_lr)
        loss, grad = loss_and_grad(params, net, data)
        steps += 1

    comparator = Comparator(
        params=params, residual_loss=loss, grad_norm=float(np.linalg.norm(grad)), steps=steps
    )
    if not comparator.converged:
        logger.warning(
            "Comparator for task %d stopped at loss %.4f after %d steps",
            task.task_uid,
            loss,
            steps,
        )
    return comparator


def comparator_spread(comparators: Sequence[np.ndarray]) -> tuple[float, np.ndarray]:
    """Return (sigma_star^2, phi_star): mean squared distance to the mean comparator."""
    stacked = np.vstack([np.asarray(c, dtype=np.float64).reshape(-1) for c in comparators])
    mean = stacked.mean(axis=0)
    return float(np.mean(np.sum((stacked - mean) ** 2, axis=1))), mean


def regret_from_losses(
    learner_losses: Sequence[Sequence[float]], comparator_losses: Sequence[Sequence[float]]
) -> list[float]:
    """Per-task regret from per-step losses grouped by task."""
    if len(learner_losses) != len(comparator_losses):
        raise ArgumentError("Learner and comparator losses cover different task counts.")
    regrets = []
    for ours, theirs in zip(learner_losses, comparator_losses):
        if len(ours) != len(theirs):
            raise ArgumentError("Learner and comparator losses cover different step counts.")
        regrets.append(float(np.sum(ours) - np.sum(theirs)))
    return regrets


def _query_loss(params: ParamSet, net: NetConfig, episode: Episode) -> float:
    query = episode.batch.query
    return ce_loss(forward(params, net, query.inputs), query.labels)


def task_averaged_regret(
    run: RunRecord, comparators: Sequence[ParamSet], net: NetConfig
) -> RegretReport:
    """
    Task-averaged regret of a recorded run against per-task comparators.

    Learner losses are the recorded query losses; comparator losses are
    recomputed on the same query sets. The smoothness constant of the neural
    loss is unknown, so ``bound_value`` is NaN here.
    """
    segments = run.segments()
    if len(comparators) != len(segments):
        raise ArgumentError(
            f"Run has {len(segments)} task segments but {len(comparators)} comparators."
        )

    learner_losses, comparator_losses = [], []
    for steps, comparator in zip(segments, comparators):
        if not comparator.matches(net):
            raise ArgumentError("Comparator layout does not match the network.")
        learner_losses.append([run.outcomes[s].query_loss for s in steps])
        comparator_losses.append([_query_loss(comparator, net, run.episodes[s]) for s in steps])

    per_task = regret_from_losses(learner_losses, comparator_losses)
    sigma_sq, phi_star = comparator_spread([c.values for c in comparators])
    initial_gaps = [
        _query_loss(start.params, net, run.episodes[start.step_index]) for start in run.task_starts
    ]
    return RegretReport(
        tar=float(np.mean(per_task)),
        sigma_star_sq=sigma_sq,
        phi_star_mean=phi_star,
        per_task_regret=per_task,
        bound_value=math.nan,
        initial_gaps=initial_gaps,
        n_tasks=len(segments),
        n_rounds=len(run),
    )


def smoothness_estimate(
    params: ParamSet,
    net: NetConfig,
    batch: LabeledBatch,
    rng: np.random.Generator,
    trials: int = 50,
    radius: float = 1e-2,
) -> float:
    """Largest observed local Lipschitz ratio of the loss gradient around ``params``."""
    _, base_grad = loss_and_grad(params, net, batch)
    worst = 0.0
    for _ in range(trials):
        direction = rng.normal(size=len(params))
        step = radius * direction / np.linalg.norm(direction)
        _, grad = loss_and_grad(params.with_values(params.values + step), net, batch)
        worst = max(worst, np.linalg.norm(grad - base_grad) / radius)
    return float(worst)
