import logging
from collections.abc import Sequence
from typing import Any

from apps.netcore.exceptions import ConfigurationError

from ..config import ExperimentConfig, apply_overrides, parse_config
from ..metrics import summary_columns
from ..records import write_csv
from .experiment_service import ExperimentService, experiment_service

logger = logging.getLogger(__name__)

SWEEP_PARAMS = {
    "ell": "detector.ell",
    "tau": "detector.tau",
    "delta": "detector.delta",
    "p_stay": "stream.p_stay",
}


class SweepService:
    """One full experiment per value of a single parameter; everything else fixed."""

    def __init__(self, runner: ExperimentService | None = None):
        self.runner = runner or experiment_service

    def _point_config(self, config: ExperimentConfig, param: str, value: Any) -> ExperimentConfig:
        overrides = {
            SWEEP_PARAMS[param]: value,
            "output_dir": str(config.output_dir / f"{param}-{value}"),
        }
        return parse_config(apply_overrides(config.to_dict(), overrides))

    def sweep(self, config: ExperimentConfig, param: str, values: Sequence[Any]) -> list[dict]:
        """
        Run the experiment at every value and write ``sweep.csv``.

        A value that fails validation becomes a row with an ``error`` entry and
        the sweep moves on; runtime failures abort the sweep.
        """
        if param not in SWEEP_PARAMS:
            raise ConfigurationError(
                f"Cannot sweep {param!r}; choose one of {', '.join(SWEEP_PARAMS)}."
            )
        if not values:
            raise ConfigurationError("A sweep needs at least one value.")

        rows = []
        for value in values:
            try:
                point = self._point_config(config, param, value)
            except ConfigurationError as err:
                logger.warning("Sweep value %s=%r rejected: %s", param, value, err)
                rows.append({"param": param, "value": value, "error": str(err)})
                continue
            summary = self.runner.run_experiment(point)
            for row in summary.rows:
                rows.append({"param": param, "value": value, **row, "error": ""})

        columns = ["param", "value", *summary_columns(config.stream), "error"]
        write_csv(config.output_dir / "sweep.csv", columns, rows)
        logger.info("Sweep of %s over %d values written", param, len(values))
        return rows


sweep_service = SweepService()
