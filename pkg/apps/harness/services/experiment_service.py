import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import replace

import django
from django.apps import apps as django_apps
from django.conf import settings

from apps.detect.detectors import DetectorParams, calibrate_tau, default_ell
from apps.learner.services.online_service import run_stream
from apps.learner.types import LearnerMode, LearnerState
from apps.netcore.network import ParamSet
from apps.stream.generators import balanced_labels, sample_points, sample_task
from apps.stream.rng import RngPurpose, make_rng

from ..config import ExperimentConfig
from ..metrics import MetricsSummary, seed_metrics, summarize
from ..records import EpisodeWriter, run_header, write_csv, write_json
from .pretrain_cache import pretrain_cache

logger = logging.getLogger(__name__)


def _init_worker():
    if not django_apps.ready:
        django.setup()


def _run_job(config: ExperimentConfig, mode: LearnerMode, index: int) -> dict[str, float]:
    return experiment_service.run_seed(config, mode, index)


class ExperimentService:
    """Runs every (mode, seed) pair of an experiment and aggregates the results."""

    def __init__(self):
        self.lab_settings = getattr(settings, "LAB_SETTINGS", {})
        self.max_workers = self.lab_settings.get("MAX_WORKERS", 1)
        self.calibration_supports = self.lab_settings.get("CALIBRATION_SUPPORTS", 200)
        self.version = self.lab_settings.get("VERSION", "")

    def pretrained(self, config: ExperimentConfig, seed: int) -> ParamSet:
        """theta_0 for ``seed``; shared by every mode through the pretrain cache."""
        return pretrain_cache.get_or_train(
            config.net,
            config.stream.pretrain_domains[0],
            config.hp,
            seed,
            n_shot=config.stream.n_shot,
            n_query=config.stream.n_query,
        )

    def calibration_supports_for(self, config: ExperimentConfig, seed: int) -> list:
        """Fresh pretrain-distribution support sets, disjoint from the stream's randomness."""
        rng = make_rng(seed, RngPurpose.CALIBRATION)
        domains = config.stream.pretrain_domains
        supports = []
        for uid in range(self.calibration_supports):
            domain = domains[int(rng.integers(len(domains)))]
            task = sample_task(domain, rng, task_uid=uid)
            labels = balanced_labels(task.n_ways, config.stream.n_shot, rng)
            supports.append(sample_points(task, labels, domain.sample_noise_sigma, rng).inputs)
        return supports

    def detector_for(self, config: ExperimentConfig, theta: ParamSet, seed: int) -> DetectorParams:
        spec = config.detector
        ell = spec.ell if spec.ell is not None else default_ell(config.net.n_classes)
        tau = spec.tau
        if tau is None:
            tau = calibrate_tau(
                self.calibration_supports_for(config, seed),
                theta,
                config.net,
                delta=spec.delta,
                coverage=spec.coverage,
                sign=spec.energy_sign,
            )
        return DetectorParams(ell=ell, tau=tau, delta=spec.delta, energy_sign=spec.energy_sign)

    def run_seed(self, config: ExperimentConfig, mode: LearnerMode, index: int) -> dict[str, float]:
        """
        One learner over one seed's stream.

        Writes ``<output_dir>/<mode>/seed<seed>/run.json`` and ``episodes.csv``
        and returns the run's metrics.
        """
        seed = config.seed(index)
        scfg = replace(config.stream, seed=seed)
        theta = self.pretrained(config, seed)
        det = self.detector_for(config, theta, seed)

        run_dir = config.output_dir / str(mode) / f"seed{seed}"
        header = run_header(config.to_dict(), str(mode), seed, self.version)
        header["detector"] = {
            "ell": det.ell,
            "tau": det.tau,
            "delta": det.delta,
            "energy_sign": str(det.energy_sign),
        }
        write_json(run_dir / "run.json", header)

        with EpisodeWriter(run_dir / "episodes.csv") as sink:
            record = run_stream(
                LearnerState(meta=theta, det=det, mode=mode),
                scfg,
                config.n_steps,
                config.net,
                config.hp,
                make_rng(seed, RngPurpose.STREAM),
                sink=sink,
                oracle=config.oracle,
            )

        metrics = seed_metrics(record, scfg)
        logger.info(
            "Finished %s seed %d: overall_acc=%.4f", mode, seed, metrics["overall_acc"]
        )
        return metrics

    def _run_all(self, config: ExperimentConfig, jobs: list[tuple[LearnerMode, int]]) -> dict:
        results = {}
        workers = min(self.max_workers, len(jobs))
        if workers <= 1:
            for mode, index in jobs:
                try:
                    results[mode, index] = self.run_seed(config, mode, index)
                except Exception:
                    logger.exception("Run %s seed %d failed", mode, config.seed(index))
                    raise
            return results

        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
            futures = {
                pool.submit(_run_job, config, mode, index): (mode, index) for mode, index in jobs
            }
            for future in as_completed(futures):
                mode, index = futures[future]
                try:
                    results[mode, index] = future.result()
                except Exception:
                    logger.exception("Run %s seed %d failed", mode, config.seed(index))
                    pool.shutdown(wait=True, cancel_futures=True)
                    raise
        return results

    def run_experiment(self, config: ExperimentConfig) -> MetricsSummary:
        """Run all modes over all seeds, then write ``summary.csv`` and ``summary.json``."""
        logger.info(
            "Experiment: modes=%s seeds=%d steps=%d -> %s",
            ",".join(map(str, config.modes)),
            config.n_seeds,
            config.n_steps,
            config.output_dir,
        )
        # pretrain once per seed before fanning out
        for index in range(config.n_seeds):
            self.pretrained(config, config.seed(index))

        jobs = [(mode, index) for index in range(config.n_seeds) for mode in config.modes]
        results = self._run_all(config, jobs)

        per_mode = {
            str(mode): [results[mode, index] for index in range(config.n_seeds)]
            for mode in config.modes
        }
        summary = summarize(per_mode, config.stream)
        write_csv(config.output_dir / "summary.csv", summary.columns, summary.rows)
        write_json(
            config.output_dir / "summary.json",
            {
                "version": self.version,
                "config": config.to_dict(),
                "modes": summary.rows,
                "seeds": per_mode,
            },
        )
        logger.info("Summary written to %s", config.output_dir / "summary.csv")
        return summary


experiment_service = ExperimentService()
