"""
Threshold detection error and the OGD meta construction.

Detection experiments clip per-sample losses at ``M_clip`` so that they are
bounded, estimate the separation levels ``ell_m`` (same task) and ``ell_p``
(new task) from a calibration pass, and threshold the support mean at their
midpoint. ``theory_run`` plays a quadratic task family end to end: contraction
steps inside a task, one OGD step on the squared distance between the task's
starting point and its comparator after it.
"""

import logging
import math
from collections.abc import Callable, Iterator, Sequence
from typing import Literal

import numpy as np

from apps.detect.detectors import DetectorParams
from apps.learner.services.online_service import run_stream
from apps.learner.types import Hyperparams, LearnerMode, LearnerState, RunRecord
from apps.netcore.exceptions import ArgumentError, RegimeError
from apps.netcore.network import NetConfig, ParamSet, ce_losses, forward
from apps.stream.generators import StreamConfig, TaskSpec, sample_points

from .regret import comparator_spread
from .types import DetectionErrorReport, QuadTask, QuadTaskFamily, RegretReport, TheoryConfig

logger = logging.getLogger(__name__)

MIN_TRIALS = 1000
SAME_TASK_PERCENTILE = 95
NEW_TASK_PERCENTILE = 5

Schedule = Callable[[int], float]


def hoeffding_bound(S: int, cfg: TheoryConfig) -> float:
    """exp(-S (ell_p - ell_m)^2 / (2 M^2))."""
    if S < 1:
        raise ArgumentError(f"Support size must be >= 1, got {S}.")
    return math.exp(-S * cfg.gap**2 / (2 * cfg.M_clip**2))


def levels_from_losses(
    same_task: Sequence[float], new_task: Sequence[float], cfg: TheoryConfig
) -> TheoryConfig:
    """Set ell_m and ell_p from expected losses of same-task and new-task rounds."""
    if len(same_task) == 0 or len(new_task) == 0:
        raise RegimeError(
            f"Calibration saw {len(same_task)} same-task and {len(new_task)} new-task rounds; "
            "both are needed."
        )
    ell_m = float(np.percentile(same_task, SAME_TASK_PERCENTILE))
    ell_p = float(np.percentile(new_task, NEW_TASK_PERCENTILE))
    if ell_m >= ell_p:
        raise RegimeError(
            f"Tasks are not separated: ell_m={ell_m:.4f} >= ell_p={ell_p:.4f}."
        )
    logger.info("Calibrated detection levels ell_m=%.4f ell_p=%.4f", ell_m, ell_p)
    return cfg.with_levels(ell_m, ell_p)


def _clipped_support_loss(
    params: ParamSet,
    net: NetConfig,
    task: TaskSpec,
    size: int,
    sigma: float,
    clip: float,
    rng: np.random.Generator,
) -> float:
    labels = rng.integers(task.n_ways, size=size)
    batch = sample_points(task, labels, sigma, rng)
    losses = ce_losses(forward(params, net, batch.inputs), batch.labels)
    return float(np.mean(np.minimum(losses, clip)))


def _oracle_trace(
    meta: ParamSet,
    det: DetectorParams,
    scfg: StreamConfig,
    n_steps: int,
    net: NetConfig,
    hp: Hyperparams,
    rng: np.random.Generator,
) -> RunRecord:
    state = LearnerState(meta=meta, det=det, mode=LearnerMode.LEEDS)
    return run_stream(state, scfg, n_steps, net, hp, rng, oracle=True, keep_params=True)


def _previous_model_losses(
    record: RunRecord,
    scfg: StreamConfig,
    net: NetConfig,
    size: int,
    clip: float,
    rng: np.random.Generator,
) -> Iterator[tuple[bool, float]]:
    """(true boundary, clipped loss of the previous online model on this task) per step >= 1."""
    for step in range(1, len(record)):
        episode = record.episodes[step]
        sigma = scfg.domain(episode.truth_domain_id).sample_noise_sigma
        loss = _clipped_support_loss(
            record.online_params[step - 1], net, episode.task, size, sigma, clip, rng
        )
        yield episode.truth_switched, loss


def calibrate_levels(
    scfg: StreamConfig,
    det: DetectorParams,
    learner_init: ParamSet,
    net: NetConfig,
    hp: Hyperparams,
    rng: np.random.Generator,
    cfg: TheoryConfig,
) -> TheoryConfig:
    """Estimate ell_m and ell_p from an oracle run of ``cfg.calibration_episodes`` steps."""
    record = _oracle_trace(learner_init, det, scfg, cfg.calibration_episodes, net, hp, rng)
    same_task, new_task = [], []
    for switched, loss in _previous_model_losses(
        record, scfg, net, cfg.eval_samples, cfg.M_clip, rng
    ):
        (new_task if switched else same_task).append(loss)
    return levels_from_losses(same_task, new_task, cfg)


def empirical_detection_error(
    scfg: StreamConfig,
    det: DetectorParams,
    learner_init: ParamSet,
    S_support: int,
    trials: int,
    rng: np.random.Generator,
    net: NetConfig,
    hp: Hyperparams,
    cfg: TheoryConfig | None = None,
) -> DetectionErrorReport:
    """
    Error rate of the midpoint threshold on clipped support losses.

    The learner follows the true boundaries so that the tested quantity is the
    detector alone. Levels come from ``cfg`` when ``ell_p > ell_m``, otherwise
    from a calibration pass on the same stream.
    """
    if S_support < 1 or trials < 1:
        raise ArgumentError("S_support and trials must be >= 1.")
    if trials < MIN_TRIALS:
        logger.warning("Only %d detection trials; the rate estimate is coarse", trials)
    cfg = cfg or TheoryConfig.for_classes(net.n_classes)
    if cfg.gap <= 0:
        cfg = calibrate_levels(scfg, det, learner_init, net, hp, rng, cfg)
    threshold = (cfg.ell_m + cfg.ell_p) / 2

    record = _oracle_trace(learner_init, det, scfg, trials + 1, net, hp, rng)
    misses = false_alarms = 0
    for switched, loss in _previous_model_losses(record, scfg, net, S_support, cfg.M_clip, rng):
        detected = loss > threshold
        if switched and not detected:
            misses += 1
        elif detected and not switched:
            false_alarms += 1

    report = DetectionErrorReport(
        support_size=S_support,
        trials=trials,
        misses=misses,
        false_alarms=false_alarms,
        ell_m=cfg.ell_m,
        ell_p=cfg.ell_p,
        threshold=threshold,
        bound=hoeffding_bound(S_support, cfg),
    )
    logger.debug(
        "S=%d: %d misses, %d false alarms, bound %.4g",
        S_support,
        misses,
        false_alarms,
        report.bound,
    )
    return report


def ogd_schedule(t: int) -> float:
    """Step size for the t-th (1-based) meta update on a 1-strongly-convex loss."""
    return 2.0 / (t + 1)


def _quad_support_loss(
    task: QuadTask, phi: np.ndarray, size: int, sigma: float, clip: float, rng: np.random.Generator
) -> float:
    xi = task.center + sigma * rng.normal(size=(size, task.dim))
    return float(np.mean(np.minimum(task.sample_losses(phi, xi), clip)))


def _play_family(
    fam: QuadTaskFamily,
    schedule: Schedule,
    theta: np.ndarray,
    boundary: Callable[[QuadTask, np.ndarray, bool], bool],
) -> tuple[list[float], list[float], list[float], int]:
    """
    Play every round of ``fam``; ``boundary(task, phi, truth)`` decides resets.

    Returns per-task regret, the loss and squared distance at each true task
    start, and the number of rounds where the decision differed from the truth.
    """
    per_task = [0.0] * fam.n_tasks
    start_losses, start_distances = [], []
    errors = meta_updates = 0
    phi = previous = None

    for t, (task, k_t) in enumerate(zip(fam.tasks, fam.K_per_task)):
        for k in range(k_t):
            truth = k == 0
            detected = True if phi is None else boundary(task, phi, truth)
            if phi is not None and detected != truth:
                errors += 1
            if detected:
                if previous is not None:
                    meta_updates += 1
                    theta = theta - schedule(meta_updates) * (theta - previous.center)
                phi = theta.copy()
            if truth:
                start_losses.append(task.loss(phi))
                start_distances.append(float(np.sum((phi - task.center) ** 2)))
            # the comparator sits at the centre, where the loss is zero
            per_task[t] += task.loss(phi)
            phi = task.gd_step(phi, fam.alpha)
            previous = task

    return per_task, start_losses, start_distances, errors


def calibrate_quad_levels(
    fam: QuadTaskFamily,
    cfg: TheoryConfig,
    rng: np.random.Generator,
    meta_lr_schedule: Schedule | None = None,
    init: np.ndarray | None = None,
) -> TheoryConfig:
    """Levels from a pass over ``fam`` with known boundaries."""
    same_task, new_task = [], []

    def observe(task: QuadTask, phi: np.ndarray, truth: bool) -> bool:
        loss = _quad_support_loss(task, phi, cfg.eval_samples, fam.noise_sigma, cfg.M_clip, rng)
        (new_task if truth else same_task).append(loss)
        return truth

    theta = np.zeros(fam.dim) if init is None else np.asarray(init, dtype=np.float64)
    _play_family(fam, meta_lr_schedule or ogd_schedule, theta, observe)
    return levels_from_losses(same_task, new_task, cfg)


def theory_run(
    fam: QuadTaskFamily,
    meta_lr_schedule: Schedule | None = None,
    detector_on: bool = False,
    rng: np.random.Generator | None = None,
    support_size: int | Literal["auto"] = "auto",
    cfg: TheoryConfig | None = None,
    init: np.ndarray | None = None,
) -> RegretReport:
    """
    Task-averaged regret of contraction steps with an OGD-trained initialisation.

    Each round costs ``f_t(phi)`` at the played iterate before its gradient
    step. Without the detector boundaries are known; with it, a boundary is
    declared when the clipped mean loss of ``support_size`` noisy samples
    exceeds the level midpoint, and a declared boundary updates the meta model
    with the centre of the task played in the previous round.
    """
    cfg = cfg or TheoryConfig()
    schedule = meta_lr_schedule or ogd_schedule
    theta = np.zeros(fam.dim) if init is None else np.asarray(init, dtype=np.float64)
    if theta.shape != (fam.dim,):
        raise ArgumentError(f"init must have shape ({fam.dim},), got {theta.shape}.")

    if detector_on:
        if rng is None:
            raise ArgumentError("The detector needs a random generator.")
        if cfg.gap <= 0:
            cfg = calibrate_quad_levels(fam, cfg, rng, schedule, theta)
        size = cfg.support_size(fam.n_rounds) if support_size == "auto" else int(support_size)
        if size < 1:
            raise ArgumentError(f"support_size must be >= 1, got {size}.")
        threshold = (cfg.ell_m + cfg.ell_p) / 2

        def boundary(task: QuadTask, phi: np.ndarray, truth: bool) -> bool:
            loss = _quad_support_loss(task, phi, size, fam.noise_sigma, cfg.M_clip, rng)
            return loss > threshold

    else:

        def boundary(task: QuadTask, phi: np.ndarray, truth: bool) -> bool:
            return truth

    per_task, start_losses, start_distances, errors = _play_family(fam, schedule, theta, boundary)

    sigma_sq, phi_star = comparator_spread(list(fam.centers))
    scale = fam.beta / (2 * (1 - fam.rho**2)) if fam.rho < 1 else math.inf
    T = fam.n_tasks
    decisions = fam.n_rounds - 1
    report = RegretReport(
        tar=float(np.mean(per_task)),
        sigma_star_sq=sigma_sq,
        phi_star_mean=phi_star,
        per_task_regret=per_task,
        bound_value=scale * (sigma_sq + math.log(T) / T),
        initial_gaps=start_losses,
        distance_bound=math.nan if detector_on else scale * float(np.mean(start_distances)),
        detection_error_rate=(errors / decisions if detector_on and decisions else math.nan),
        n_tasks=T,
        n_rounds=fam.n_rounds,
    )
    logger.debug("theory_run over %d tasks: TAR %.5f", T, report.tar)
    return report


def average_reports(reports: Sequence[RegretReport]) -> RegretReport:
    """Seed average of independent runs; per-task regrets are pooled."""
    if not reports:
        raise ArgumentError("Nothing to average.")

    def mean_of(name: str) -> float:
        return float(np.mean([getattr(report, name) for report in reports]))

    return RegretReport(
        tar=mean_of("tar"),
        sigma_star_sq=mean_of("sigma_star_sq"),
        phi_star_mean=np.mean([report.phi_star_mean for report in reports], axis=0),
        per_task_regret=[r for report in reports for r in report.per_task_regret],
        bound_value=mean_of("bound_value"),
        initial_gaps=[g for report in reports for g in report.initial_gaps],
        distance_bound=mean_of("distance_bound"),
        detection_error_rate=mean_of("detection_error_rate"),
        n_tasks=round(mean_of("n_tasks")),
        n_rounds=round(mean_of("n_rounds")),
    )
