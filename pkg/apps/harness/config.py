"""
Experiment configuration.

An experiment is described by one JSON document. ``load_config`` reads it,
applies dotted command-line overrides and validates the result with the
serializers in :mod:`apps.harness.serializers`; the validated
``ExperimentConfig`` can be written back with ``to_dict``.
"""

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from apps.detect.detectors import EnergySign
from apps.learner.types import Hyperparams, LearnerMode
from apps.netcore.exceptions import ConfigurationError
from apps.netcore.network import NetConfig
from apps.stream.generators import StreamConfig
from apps.theory.types import TheoryConfig

AUTO = "auto"


@dataclass(frozen=True)
class DetectorSpec:
    """Detector settings; ``None`` thresholds are resolved per seed."""

    ell: float | None = None
    tau: float | None = None
    delta: float = 1.0
    energy_sign: EnergySign = EnergySign.NEGATED
    coverage: float = 0.95

    def __post_init__(self):
        try:
            object.__setattr__(self, "energy_sign", EnergySign(self.energy_sign))
        except ValueError as err:
            raise ConfigurationError(f"Unknown energy_sign: {self.energy_sign!r}") from err
        if self.ell is not None and not self.ell > 0:
            raise ConfigurationError(f"ell must be > 0, got {self.ell}.")
        if self.tau is not None and math.isnan(self.tau):
            raise ConfigurationError("tau must not be NaN.")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ConfigurationError(f"delta must be finite and > 0, got {self.delta}.")
        if not 0 < self.coverage < 1:
            raise ConfigurationError(f"coverage must lie in (0, 1), got {self.coverage}.")

    @property
    def calibrated(self) -> bool:
        return self.tau is None


@dataclass(frozen=True)
class ExperimentConfig:
    net: NetConfig
    stream: StreamConfig
    hp: Hyperparams
    detector: DetectorSpec
    modes: tuple[LearnerMode, ...]
    n_steps: int
    n_seeds: int
    output_dir: Path
    oracle: bool = False
    theory: TheoryConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(LearnerMode(m) for m in self.modes))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if not self.modes or len(set(self.modes)) != len(self.modes):
            raise ConfigurationError("modes must be a non-empty list without repeats.")
        if self.n_steps < 1 or self.n_seeds < 1:
            raise ConfigurationError("n_steps and n_seeds must be >= 1.")
        if self.stream.n_ways != self.net.n_classes:
            raise ConfigurationError("Domain n_ways must equal net.n_classes.")
        if self.stream.domains[0].dim != self.net.input_dim:
            raise ConfigurationError("Domain centre dimension must equal net.input_dim.")

    def seed(self, index: int) -> int:
        """Stream seed of the ``index``-th repetition; shared by every mode."""
        return self.stream.seed + index

    def to_dict(self) -> dict[str, Any]:
        detector = asdict(self.detector)
        for key in ("ell", "tau"):
            if detector[key] is None:
                detector[key] = AUTO
        doc = {
            "net": asdict(self.net),
            "stream": asdict(self.stream),
            "hp": asdict(self.hp),
            "detector": detector,
            "modes": [str(m) for m in self.modes],
            "n_steps": self.n_steps,
            "n_seeds": self.n_seeds,
            "output_dir": str(self.output_dir),
            "oracle": self.oracle,
        }
        if self.theory is not None:
            doc["theory"] = asdict(self.theory)
        return _plain(doc)


def _plain(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, str):
        return str(value)
    return value


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(tokens: Sequence[str]) -> dict[str, Any]:
    """
    Turn ``["--stream.p_stay", "0.75", "--n_seeds=3"]`` into a path -> value map.

    Values are parsed as JSON when possible and kept as strings otherwise.
    """
    overrides: dict[str, Any] = {}
    tokens = list(tokens)
    while tokens:
        token = tokens.pop(0)
        if not token.startswith("--") or len(token) == 2:
            raise ConfigurationError(f"Expected an option like --stream.p_stay, got {token!r}.")
        key, sep, raw = token[2:].partition("=")
        if not sep:
            if not tokens:
                raise ConfigurationError(f"Option --{key} needs a value.")
            raw = tokens.pop(0)
        overrides[key] = parse_value(raw)
    return overrides


def apply_overrides(doc: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Set dotted paths in a copy of ``doc``; integer segments index lists."""
    doc = json.loads(json.dumps(doc))
    for path, value in overrides.items():
        target: Any = doc
        *parents, leaf = path.split(".")
        try:
            for part in parents:
                if isinstance(target, list):
                    target = target[int(part)]
                elif isinstance(target, dict):
                    target = target.setdefault(part, {})
                else:
                    raise TypeError(f"{type(target).__name__} has no fields")
            if isinstance(target, list):
                target[int(leaf)] = value
            elif isinstance(target, dict):
                target[leaf] = value
            else:
                raise TypeError(f"{type(target).__name__} has no fields")
        except (IndexError, ValueError, TypeError) as err:
            raise ConfigurationError(f"Cannot override {path}: {err}") from err
    return doc


def flatten_errors(errors: Any, prefix: str = "") -> Iterable[str]:
    """Serializer errors as ``field.path: message`` lines."""
    if isinstance(errors, Mapping):
        for key, value in errors.items():
            name = "" if key == "non_field_errors" else str(key)
            path = ".".join(p for p in (prefix, name) if p)
            yield from flatten_errors(value, path)
    elif isinstance(errors, list) and errors and not isinstance(errors[0], str):
        for index, value in enumerate(errors):
            yield from flatten_errors(value, f"{prefix}.{index}" if prefix else str(index))
    elif isinstance(errors, list):
        for message in errors:
            yield f"{prefix or 'config'}: {message}"
    elif errors:
        yield f"{prefix or 'config'}: {errors}"


def parse_config(doc: Any) -> ExperimentConfig:
    from .serializers import ExperimentSerializer

    serializer = ExperimentSerializer(data=doc)
    if not serializer.is_valid():
        raise ConfigurationError("\n".join(flatten_errors(serializer.errors)))
    return serializer.validated_data


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigurationError(f"Cannot read config {path}: {err.strerror}") from err
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"{path} is not valid JSON: {err}") from err
    if overrides:
        doc = apply_overrides(doc, overrides)
    return parse_config(doc)
