import logging

import numpy as np

from apps.netcore.exceptions import ConfigurationError, NumericError, TrainingError
from apps.netcore.network import (
    NetConfig,
    ParamSet,
    accuracy,
    forward,
    init_params,
    loss_and_grad,
    sgd_step,
)
from apps.stream.generators import DomainSpec, TaskBatch, sample_batch, sample_task

from ..types import Hyperparams

logger = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e3
LOG_EVERY = 500


def adapt(
    params: ParamSet, net: NetConfig, batch: TaskBatch, alpha1: float, steps: int = 1
) -> ParamSet:
    """Plain gradient steps on the support set."""
    for _ in range(steps):
        _, grad = loss_and_grad(params, net, batch.support)
        params = sgd_step(params, grad, alpha1)
    return params


def pretrain_maml(
    domain: DomainSpec,
    net: NetConfig,
    hp: Hyperparams,
    rng: np.random.Generator,
    n_shot: int = 5,
    n_query: int = 5,
    init: ParamSet | None = None,
) -> ParamSet:
    """
    First-order MAML on tasks from ``domain``.

    Tasks are drawn in meta-batches of ``hp.pretrain_meta_batch`` until
    ``hp.pretrain_tasks`` tasks have been used; the final meta-batch may be
    smaller. Each task adapts for ``hp.inner_steps_pretrain`` steps on its
    support set and contributes the query gradient at the adapted parameters.
    """
    if not domain.is_pretrain:
        raise ConfigurationError(f"Domain {domain.domain_id} is not a pretrain domain.")
    if domain.n_ways != net.n_classes:
        raise ConfigurationError("Domain n_ways must equal the network's n_classes.")

    theta = init if init is not None else init_params(net, rng)
    remaining = hp.pretrain_tasks
    logger.info(
        "Pretraining on %s: %d tasks in %d iterations",
        domain.label,
        hp.pretrain_tasks,
        hp.pretrain_iterations,
    )

    for iteration in range(hp.pretrain_iterations):
        n_tasks = min(hp.pretrain_meta_batch, remaining)
        remaining -= n_tasks
        meta_grad = np.zeros(len(theta))
        total_loss = 0.0

        try:
            for _ in range(n_tasks):
                task = sample_task(domain, rng)
                batch = sample_batch(task, n_shot, n_query, domain.sample_noise_sigma, rng)
                adapted = adapt(theta, net, batch, hp.alpha1, hp.inner_steps_pretrain)
                query_loss, query_grad = loss_and_grad(adapted, net, batch.query)
                total_loss += query_loss
                meta_grad += query_grad
            theta = sgd_step(theta, meta_grad / n_tasks, hp.alpha2)
        except NumericError as err:
            raise TrainingError(
                f"Pretraining diverged at iteration {iteration}: {err}", iteration=iteration
            ) from err

        mean_loss = total_loss / n_tasks
        if not np.isfinite(mean_loss) or mean_loss > DIVERGENCE_LOSS:
            raise TrainingError(
                f"Pretraining diverged at iteration {iteration} (query loss {mean_loss}).",
                iteration=iteration,
            )
        if (iteration + 1) % LOG_EVERY == 0:
            logger.debug("Pretrain iteration %d: meta loss %.4f", iteration + 1, mean_loss)

    logger.info("Pretraining on %s finished", domain.label)
    return theta


def evaluate_adaptation(
    theta: ParamSet,
    domain: DomainSpec,
    net: NetConfig,
    hp: Hyperparams,
    rng: np.random.Generator,
    n_tasks: int = 100,
    n_shot: int = 5,
    n_query: int = 5,
    steps: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Query accuracy on fresh tasks before and after adapting ``theta``."""
    zero_shot = np.empty(n_tasks)
    adapted = np.empty(n_tasks)
    for i in range(n_tasks):
        task = sample_task(domain, rng)
        batch = sample_batch(task, n_shot, n_query, domain.sample_noise_sigma, rng)
        query = batch.query
        zero_shot[i] = accuracy(forward(theta, net, query.inputs), query.labels)
        phi = adapt(theta, net, batch, hp.alpha1, steps)
        adapted[i] = accuracy(forward(phi, net, query.inputs), query.labels)
    return zero_shot, adapted
