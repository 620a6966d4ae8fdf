"""
Threshold detectors for task switches and distribution shift.

A task switch is flagged when the previous online model's support loss rises
above ``ell``. A distribution shift is flagged when the mean negative free
energy of the support set under the meta model falls to ``tau`` or below.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        """Backport of ``enum.StrEnum`` for Python 3.10."""

        __str__ = str.__str__
        __format__ = str.__format__

        @staticmethod
        def _generate_next_value_(name, start, count, last_values):
            return name.lower()


import numpy as np
from scipy.special import logsumexp

from apps.netcore.exceptions import ArgumentError, ConfigurationError
from apps.netcore.network import LabeledBatch, NetConfig, ParamSet, ce_loss, forward

logger = logging.getLogger(__name__)

MIN_CALIBRATION_SUPPORTS = 20
TIE_TOLERANCE = 1e-9


class EnergySign(StrEnum):
    # exp(-g/delta), as written for the free-energy classifier
    NEGATED = "negated"
    # exp(+g/delta), the common energy-OOD convention
    STANDARD = "standard"

    @classmethod
    def _missing_(cls, value):
        return ENERGY_SIGN_ALIASES.get(value)


ENERGY_SIGN_ALIASES = {"paper": EnergySign.NEGATED, "literature": EnergySign.STANDARD}


@dataclass(frozen=True)
class DetectorParams:
    ell: float
    tau: float
    delta: float = 1.0
    energy_sign: EnergySign = EnergySign.NEGATED

    def __post_init__(self):
        try:
            object.__setattr__(self, "energy_sign", EnergySign(self.energy_sign))
        except ValueError as err:
            raise ConfigurationError(f"Unknown energy_sign: {self.energy_sign!r}") from err
        if not self.ell > 0:
            raise ConfigurationError(f"ell must be > 0, got {self.ell}.")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ConfigurationError(f"delta must be finite and > 0, got {self.delta}.")
        if math.isnan(self.tau):
            raise ConfigurationError("tau must not be NaN.")


def energy(
    logits: np.ndarray, delta: float = 1.0, sign: EnergySign | str = EnergySign.NEGATED
) -> np.ndarray | float:
    """
    Free energy of each logit row.

    A 1-d input returns a float; a matrix returns one energy per row.
    """
    if delta <= 0:
        raise ArgumentError(f"delta must be > 0, got {delta}.")
    g = np.asarray(logits, dtype=np.float64)
    scale = -1.0 if EnergySign(sign) is EnergySign.NEGATED else 1.0
    values = -delta * logsumexp(scale * g / delta, axis=-1)
    return float(values) if g.ndim == 1 else values


def ood_score(
    support_inputs: np.ndarray,
    params: ParamSet,
    cfg: NetConfig,
    delta: float = 1.0,
    sign: EnergySign | str = EnergySign.NEGATED,
) -> float:
    """Mean negative energy over the support rows."""
    inputs = np.atleast_2d(np.asarray(support_inputs, dtype=np.float64))
    if inputs.shape[0] == 0:
        raise ArgumentError("OOD scoring needs a non-empty support set.")
    return float(np.mean(-energy(forward(params, cfg, inputs), delta, sign)))


def ood_classify(
    support_inputs: np.ndarray, params: ParamSet, cfg: NetConfig, det: DetectorParams
) -> bool:
    """True means covariate shift; a score equal to tau counts as shifted."""
    return ood_score(support_inputs, params, cfg, det.delta, det.energy_sign) <= det.tau


def switch_detect(
    prev_online: ParamSet, cfg: NetConfig, support: LabeledBatch, ell: float
) -> tuple[bool, float]:
    loss = ce_loss(forward(prev_online, cfg, support.inputs), support.labels)
    return loss > ell, loss


def tau_from_scores(scores: Sequence[float], coverage: float = 0.95) -> float:
    """
    Threshold such that at least ``coverage`` of ``scores`` lie strictly above it.

    With ``k = floor((1 - coverage) * n)`` the k-th smallest score is returned;
    when ``k == 0`` the threshold sits just below the minimum. If the k-th
    score ties with the next one, the threshold drops to the largest score
    below the tie, so ties never cost coverage.
    """
    values = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    if values.size == 0:
        raise ArgumentError("Cannot calibrate tau from an empty score set.")
    if not 0.0 < coverage < 1.0:
        raise ArgumentError(f"coverage must lie in (0, 1), got {coverage}.")

    # rounding keeps 0.05 * 100 from flooring to 4
    k = math.floor(round((1.0 - coverage) * values.size, 9))
    if k == 0:
        return float(values[0] - TIE_TOLERANCE)
    tau = values[k - 1]
    if values[k] == tau:
        below = int(np.searchsorted(values, tau, side="left"))
        return float(values[below - 1]) if below else float(values[0] - TIE_TOLERANCE)
    return float(tau)


def calibrate_tau(
    pretrain_supports: Sequence[np.ndarray],
    params: ParamSet,
    cfg: NetConfig,
    delta: float = 1.0,
    coverage: float = 0.95,
    sign: EnergySign | str = EnergySign.NEGATED,
) -> float:
    if len(pretrain_supports) == 0:
        raise ArgumentError("calibrate_tau needs at least one pretrain support set.")
    if len(pretrain_supports) < MIN_CALIBRATION_SUPPORTS:
        logger.warning(
            "Calibrating tau from %d supports; at least %d are recommended.",
            len(pretrain_supports),
            MIN_CALIBRATION_SUPPORTS,
        )

    scores = [ood_score(s, params, cfg, delta, sign) for s in pretrain_supports]
    tau = tau_from_scores(scores, coverage)
    logger.info("Calibrated tau=%.6f from %d supports (coverage %.3f)", tau, len(scores), coverage)
    return tau


def default_ell(n_ways: int) -> float:
    """Support loss of a uniform (untrained) classifier."""
    if n_ways < 2:
        raise ArgumentError(f"n_ways must be >= 2, got {n_ways}.")
    return math.log(n_ways)
