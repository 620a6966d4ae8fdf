"""
Online learners: LEEDS and the comparison baselines.

Every step consumes one episode and returns the next learner state together
with an :class:`EpisodeOutcome`. Meta updates are first order: the query
gradient is taken at the adapted parameters and applied to the previous meta
model.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, replace

import numpy as np

from apps.detect.detectors import ood_classify, switch_detect
from apps.netcore.exceptions import ArgumentError, ConfigurationError, NumericError
from apps.netcore.network import (
    LabeledBatch,
    NetConfig,
    ParamSet,
    accuracy,
    ce_loss,
    forward,
    loss_and_grad,
    sgd_step,
)
from apps.stream.generators import Episode, StreamConfig, StreamState, next_episode

from ..types import (
    Branch,
    EpisodeOutcome,
    Hyperparams,
    LearnerMode,
    LearnerState,
    RunRecord,
    TaskStart,
)

logger = logging.getLogger(__name__)

EpisodeSink = Callable[[Episode, EpisodeOutcome], None]


@dataclass(frozen=True)
class Decisions:
    """Detector decisions injected in place of the learner's own detectors."""

    switched: bool
    shifted: bool


@dataclass(frozen=True, eq=False)
class _StepResult:
    state: LearnerState
    outcome: EpisodeOutcome
    start: ParamSet
    online: ParamSet


def _evaluate(params: ParamSet, net: NetConfig, query: LabeledBatch) -> tuple[float, float]:
    logits = forward(params, net, query.inputs)
    return ce_loss(logits, query.labels), accuracy(logits, query.labels)


def _adapt_from_meta(
    meta: ParamSet, net: NetConfig, support: LabeledBatch, hp: Hyperparams
) -> tuple[float, ParamSet]:
    loss, grad = loss_and_grad(meta, net, support)
    return loss, sgd_step(meta, grad, hp.alpha1)


def _meta_update(
    meta: ParamSet, adapted: ParamSet, net: NetConfig, query: LabeledBatch, hp: Hyperparams
) -> ParamSet:
    _, grad = loss_and_grad(adapted, net, query)
    return sgd_step(meta, grad, hp.alpha2)


def _detect(
    state: LearnerState, ep: Episode, hp: Hyperparams, net: NetConfig
) -> tuple[bool, bool, float | None]:
    """Return (switched, shifted, support loss of the previous online model)."""
    support = ep.batch.support
    # only LEEDS proper carries the distribution-shift module
    shifted = state.mode is LearnerMode.LEEDS and ood_classify(
        support.inputs, state.meta, net, state.det
    )

    if state.online is None:
        return True, shifted, None

    switched, loss = switch_detect(state.online, net, support, state.det.ell)
    if state.mode is LearnerMode.CMAML_DETECT:
        switched = bool(loss - state.last_support_loss > hp.cmaml_gamma)
    return switched, shifted, loss


def _leeds_flow(
    state: LearnerState,
    ep: Episode,
    net: NetConfig,
    hp: Hyperparams,
    decisions: Decisions | None,
) -> _StepResult:
    support, query = ep.batch.support, ep.batch.query
    switched, shifted, support_loss = _detect(state, ep, hp, net)
    if decisions is not None:
        switched = decisions.switched or state.online is None
        shifted = decisions.shifted and state.mode is LearnerMode.LEEDS

    branch = Branch.SWITCH
    try:
        if switched:
            meta_loss, adapted = _adapt_from_meta(state.meta, net, support, hp)
            if support_loss is None:
                support_loss = meta_loss
            start, online = state.meta, adapted
            meta = _meta_update(state.meta, adapted, net, query, hp)
        else:
            branch = Branch.NO_SWITCH_OOD if shifted else Branch.NO_SWITCH_IND
            _, grad = loss_and_grad(state.online, net, support)
            start, online = state.online, sgd_step(state.online, grad, hp.alpha1)
            meta = state.meta
            if shifted:
                _, adapted = _adapt_from_meta(state.meta, net, support, hp)
                meta = _meta_update(state.meta, adapted, net, query, hp)
        query_loss, query_acc = _evaluate(online, net, query)
    except NumericError as err:
        raise NumericError(
            f"Step {ep.step_index} failed in branch {branch}: {err}",
            layer=err.layer,
            branch=str(branch),
        ) from err

    outcome = EpisodeOutcome(
        step_index=ep.step_index,
        query_loss=query_loss,
        query_accuracy=query_acc,
        detected_switch=switched,
        detected_ood=shifted,
        truth_switched=ep.truth_switched,
        truth_domain_id=ep.truth_domain_id,
        support_loss=support_loss,
        branch=branch,
    )
    new_state = replace(
        state,
        meta=meta,
        online=online,
        last_support_loss=support_loss,
        steps_seen=state.steps_seen + 1,
    )
    return _StepResult(new_state, outcome, start, online)


def _reset_flow(
    state: LearnerState, ep: Episode, net: NetConfig, hp: Hyperparams
) -> _StepResult:
    """Adapt from the meta model on every episode; meta_ogd also updates it."""
    support, query = ep.batch.support, ep.batch.query
    try:
        support_loss, online = _adapt_from_meta(state.meta, net, support, hp)
        query_loss, query_acc = _evaluate(online, net, query)
        meta = state.meta
        if state.mode is LearnerMode.META_OGD:
            meta = _meta_update(state.meta, online, net, query, hp)
    except NumericError as err:
        raise NumericError(
            f"Step {ep.step_index} failed in {state.mode}: {err}",
            layer=err.layer,
            branch=str(Branch.SWITCH),
        ) from err

    outcome = EpisodeOutcome(
        step_index=ep.step_index,
        query_loss=query_loss,
        query_accuracy=query_acc,
        detected_switch=True,
        detected_ood=False,
        truth_switched=ep.truth_switched,
        truth_domain_id=ep.truth_domain_id,
        support_loss=support_loss,
        branch=Branch.SWITCH,
    )
    new_state = replace(
        state,
        meta=meta,
        online=online,
        last_support_loss=support_loss,
        steps_seen=state.steps_seen + 1,
    )
    return _StepResult(new_state, outcome, state.meta, online)


def _step(
    state: LearnerState,
    ep: Episode,
    net: NetConfig,
    hp: Hyperparams,
    decisions: Decisions | None = None,
) -> _StepResult:
    match state.mode:
        case LearnerMode.LEEDS | LearnerMode.LEEDS_NO_DA | LearnerMode.CMAML_DETECT:
            return _leeds_flow(state, ep, net, hp, decisions)
        case LearnerMode.MAML_RESET | LearnerMode.META_OGD:
            return _reset_flow(state, ep, net, hp)
    raise ConfigurationError(f"Unknown learner mode: {state.mode!r}")


def leeds_step(
    state: LearnerState,
    ep: Episode,
    net: NetConfig,
    hp: Hyperparams,
    decisions: Decisions | None = None,
) -> tuple[LearnerState, EpisodeOutcome]:
    if state.mode is not LearnerMode.LEEDS:
        state = replace(state, mode=LearnerMode.LEEDS)
    result = _leeds_flow(state, ep, net, hp, decisions)
    return result.state, result.outcome


def baseline_step(
    state: LearnerState, ep: Episode, net: NetConfig, hp: Hyperparams
) -> tuple[LearnerState, EpisodeOutcome]:
    result = _step(state, ep, net, hp)
    return result.state, result.outcome


def run_stream(
    initial: LearnerState,
    scfg: StreamConfig,
    n_steps: int,
    net: NetConfig,
    hp: Hyperparams,
    rng: np.random.Generator,
    sink: EpisodeSink | None = None,
    oracle: bool = False,
    keep_params: bool = False,
) -> RunRecord:
    """
    Advance the stream and the learner together for ``n_steps`` episodes.

    With ``oracle`` the detector decisions are replaced by ground truth: a
    switch is the true task boundary and a shift is a task from a non-pretrain
    domain. ``sink`` is called after every episode so that callers can persist
    the run incrementally.
    """
    if n_steps < 1:
        raise ArgumentError(f"n_steps must be >= 1, got {n_steps}.")
    if not initial.meta.matches(net):
        raise ConfigurationError("Initial meta parameters do not match the network.")
    if scfg.n_ways != net.n_classes:
        raise ConfigurationError("Stream n_ways must equal the network's n_classes.")

    record = RunRecord(mode=initial.mode)
    state, stream_state = initial, StreamState()
    for _ in range(n_steps):
        episode, stream_state = next_episode(stream_state, scfg, rng)
        decisions = None
        if oracle:
            decisions = Decisions(
                switched=episode.truth_switched,
                shifted=not scfg.is_pretrain(episode.truth_domain_id),
            )
        result = _step(state, episode, net, hp, decisions)
        state = result.state

        record.outcomes.append(result.outcome)
        record.episodes.append(episode)
        if episode.truth_switched:
            record.task_starts.append(
                TaskStart(
                    step_index=episode.step_index,
                    task_uid=episode.task.task_uid,
                    domain_id=episode.truth_domain_id,
                    params=result.start,
                )
            )
        if keep_params:
            record.online_params.append(result.online)
            record.meta_params.append(state.meta)
        if sink is not None:
            sink(episode, result.outcome)

    record.final_state = state
    logger.debug("Run of %d steps in mode %s finished", n_steps, initial.mode)
    return record
