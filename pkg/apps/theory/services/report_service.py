import logging
import math
from collections.abc import Callable
from dataclasses import asdict

import numpy as np
from django.conf import settings

from apps.detect.detectors import DetectorParams
from apps.learner.types import Hyperparams
from apps.netcore.exceptions import RegimeError
from apps.netcore.network import NetConfig, ParamSet
from apps.stream.generators import StreamConfig, sample_batch, sample_task
from apps.stream.rng import RngPurpose, make_rng

from ..bounds import average_reports, calibrate_levels, empirical_detection_error, theory_run
from ..quadratic import (
    closed_form_rho,
    contraction_ratio,
    contraction_trace,
    gradient_lipschitz_ratio,
    make_quad_family,
    random_spectrum,
)
from ..regret import smoothness_estimate
from ..types import QuadTask, QuadTaskFamily, RegretReport, TheoryCheck, TheoryConfig

logger = logging.getLogger(__name__)

CONTRACTION_TOLERANCE = 1e-8
TAR_FLOOR = -1e-10
DECAY_TASKS = (20, 200)
PLATEAU_TASKS = (200, 400)
PLATEAU_TOLERANCE = 0.1
TRADEOFF_SPREADS = (0.5, 1.0, 2.0)
TRADEOFF_SUPPORT = 32
TRADEOFF_CLIP = 50.0


class TheoryReportService:
    """Runs the assumption and bound checks and collects them as TheoryCheck rows."""

    def __init__(self):
        self.lab_settings = getattr(settings, "LAB_SETTINGS", {})
        self.seeds = self.lab_settings.get("THEORY_SEEDS", 20)
        self.support_grid = tuple(self.lab_settings.get("THEORY_SUPPORT_GRID", (4, 8, 16, 32)))
        self.detection_trials = self.lab_settings.get("THEORY_DETECTION_TRIALS", 10_000)

    def _seed_average(
        self, build: Callable[[np.random.Generator], QuadTaskFamily], n_tasks: int, **kwargs
    ) -> RegretReport:
        reports = []
        for seed in range(self.seeds):
            fam = build(make_rng(seed, RngPurpose.THEORY)).truncated(n_tasks)
            reports.append(theory_run(fam, rng=make_rng(seed, RngPurpose.DETECTION), **kwargs))
        return average_reports(reports)

    def contraction_checks(self, rng: np.random.Generator, n_quads: int = 50) -> list[TheoryCheck]:
        worst_gap, worst_chain, worst_smooth = 0.0, 0.0, 0.0
        for _ in range(n_quads):
            mu = rng.uniform(0.1, 1.0)
            beta = mu + rng.uniform(0.0, 3.0)
            alpha = rng.uniform(0.05, 1.95) / beta
            empirical, closed = contraction_ratio(mu, beta, alpha, trials=5, rng=rng)
            worst_gap = max(worst_gap, abs(empirical - closed))

            task = QuadTask(center=rng.normal(size=4), curvature=random_spectrum(4, mu, beta, rng))
            trace = contraction_trace(task, alpha, rng.normal(size=4), steps=20)
            rho = closed_form_rho(mu, beta, alpha)
            allowed = rho ** np.arange(trace.size) * trace[0] * (1 + CONTRACTION_TOLERANCE)
            worst_chain = max(worst_chain, float(np.max(trace - allowed)))
            worst_smooth = max(worst_smooth, gradient_lipschitz_ratio(task, rng) / beta)

        return [
            TheoryCheck(
                "contraction_closed_form",
                worst_gap,
                CONTRACTION_TOLERANCE,
                worst_gap <= CONTRACTION_TOLERANCE,
                f"{n_quads} random quadratics",
            ),
            TheoryCheck(
                "contraction_chaining",
                worst_chain,
                0.0,
                worst_chain <= 0.0,
                "max of |phi^k - phi*| - rho^k |phi^0 - phi*| (1 + 1e-8)",
            ),
            TheoryCheck(
                "quadratic_smoothness",
                worst_smooth,
                1.0,
                worst_smooth <= 1.0 + 1e-12,
                "gradient Lipschitz ratio / beta",
            ),
        ]

    def tar_checks(self) -> list[TheoryCheck]:
        def zero_variance(rng):
            return make_quad_family(4, DECAY_TASKS[-1], 0.0, rng, base_center=np.full(4, 3.0))

        def spread_family(rng):
            return make_quad_family(8, PLATEAU_TASKS[-1], 1.0, rng)

        short, long = (self._seed_average(zero_variance, n).tar for n in DECAY_TASKS)
        first, second = (self._seed_average(spread_family, n) for n in PLATEAU_TASKS)
        drift = abs(second.tar - first.tar) / first.tar
        floor = min(first.per_task_regret + second.per_task_regret)
        return [
            TheoryCheck(
                "tar_zero_variance_decay",
                long / short,
                0.5,
                long < 0.5 * short,
                f"TAR({DECAY_TASKS[-1]}) / TAR({DECAY_TASKS[0]})",
            ),
            TheoryCheck(
                "tar_plateau",
                drift,
                PLATEAU_TOLERANCE,
                drift < PLATEAU_TOLERANCE,
                f"|TAR({PLATEAU_TASKS[1]}) - TAR({PLATEAU_TASKS[0]})| / TAR({PLATEAU_TASKS[0]})",
            ),
            TheoryCheck("tar_nonnegative", floor, TAR_FLOOR, floor >= TAR_FLOOR),
            TheoryCheck(
                "tar_within_distance_bound",
                first.tar - first.distance_bound,
                0.0,
                first.tar <= first.distance_bound,
            ),
        ]

    def tradeoff_checks(self) -> list[TheoryCheck]:
        cfg = TheoryConfig(M_clip=TRADEOFF_CLIP)
        tars, errors = [], []
        for spread in TRADEOFF_SPREADS:

            def build(rng, spread=spread):
                return make_quad_family(8, PLATEAU_TASKS[0], spread, rng, noise_sigma=0.3)

            try:
                report = self._seed_average(
                    build,
                    PLATEAU_TASKS[0],
                    detector_on=True,
                    support_size=TRADEOFF_SUPPORT,
                    cfg=cfg,
                )
            except RegimeError as err:
                return [TheoryCheck("tradeoff", math.nan, math.nan, False, str(err))]
            tars.append(report.tar)
            errors.append(report.detection_error_rate)

        spreads = ", ".join(str(s) for s in TRADEOFF_SPREADS)
        return [
            TheoryCheck(
                "tradeoff_tar_increases_with_spread",
                float(np.min(np.diff(tars))),
                0.0,
                bool(np.all(np.diff(tars) > 0)),
                f"spreads {spreads}: TAR {tars}",
            ),
            TheoryCheck(
                "tradeoff_detection_error_decreases_with_spread",
                float(np.max(np.diff(errors))),
                0.0,
                bool(np.all(np.diff(errors) < 0)),
                f"spreads {spreads}: error {errors}",
            ),
        ]

    def hoeffding_checks(
        self,
        scfg: StreamConfig,
        det: DetectorParams,
        theta: ParamSet,
        net: NetConfig,
        hp: Hyperparams,
        cfg: TheoryConfig,
    ) -> list[TheoryCheck]:
        if cfg.gap <= 0:
            try:
                cfg = calibrate_levels(
                    scfg, det, theta, net, hp, make_rng(scfg.seed, RngPurpose.CALIBRATION), cfg
                )
            except RegimeError as err:
                logger.warning("Detection regime not separated: %s", err)
                return [TheoryCheck("hoeffding", math.nan, math.nan, False, str(err))]

        checks = []
        for size in self.support_grid:
            rng = make_rng(scfg.seed, RngPurpose.DETECTION, size)
            report = empirical_detection_error(
                scfg, det, theta, size, self.detection_trials, rng, net, hp, cfg
            )
            checks.append(
                TheoryCheck(
                    f"hoeffding_S{size}",
                    report.rate,
                    report.bound + report.slack,
                    report.within_bound,
                    f"{report.misses} misses, {report.false_alarms} false alarms "
                    f"in {report.trials} trials",
                )
            )
        return checks

    def smoothness_check(self, scfg: StreamConfig, theta: ParamSet, net: NetConfig) -> TheoryCheck:
        """Local Lipschitz estimate of the neural loss gradient; reported, never failed."""
        rng = make_rng(scfg.seed, RngPurpose.THEORY)
        domain = scfg.pretrain_domains[0]
        batch = sample_batch(
            sample_task(domain, rng), scfg.n_shot, 1, domain.sample_noise_sigma, rng
        ).support
        estimate = smoothness_estimate(theta, net, batch, rng)
        return TheoryCheck("neural_smoothness_estimate", estimate, math.nan, True, "reported only")

    def run_theory_checks(
        self,
        scfg: StreamConfig | None = None,
        det: DetectorParams | None = None,
        theta: ParamSet | None = None,
        net: NetConfig | None = None,
        hp: Hyperparams | None = None,
        cfg: TheoryConfig | None = None,
    ) -> list[TheoryCheck]:
        """Quadratic checks always; neural checks when a pretrained model is given."""
        checks = self.contraction_checks(make_rng(0, RngPurpose.THEORY))
        checks += self.tar_checks()
        checks += self.tradeoff_checks()
        if theta is not None:
            cfg = cfg or TheoryConfig.for_classes(net.n_classes)
            checks += self.hoeffding_checks(scfg, det, theta, net, hp, cfg)
            checks.append(self.smoothness_check(scfg, theta, net))

        failed = [check.name for check in checks if not check.passed]
        if failed:
            logger.warning("Theory checks failed: %s", ", ".join(failed))
        else:
            logger.info("All %d theory checks passed", len(checks))
        return checks

    def to_payload(self, checks: list[TheoryCheck]) -> dict:
        def clean(value):
            if isinstance(value, float) and not math.isfinite(value):
                return None
            return value

        rows = [{key: clean(value) for key, value in asdict(check).items()} for check in checks]
        return {
            "version": self.lab_settings.get("VERSION", ""),
            "passed": all(check.passed for check in checks),
            "checks": rows,
        }


theory_report_service = TheoryReportService()
