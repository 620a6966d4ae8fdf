import math
from dataclasses import dataclass, field
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


from apps.detect.detectors import DetectorParams
from apps.netcore.exceptions import ConfigurationError
from apps.netcore.network import ParamSet
from apps.stream.generators import Episode


class LearnerMode(StrEnum):
    LEEDS = "leeds"
    LEEDS_NO_DA = "leeds_no_da"
    MAML_RESET = "maml_reset"
    META_OGD = "meta_ogd"
    CMAML_DETECT = "cmaml_detect"


class Branch(StrEnum):
    NO_SWITCH_IND = "no_switch_ind"
    NO_SWITCH_OOD = "no_switch_ood"
    SWITCH = "switch"


@dataclass(frozen=True)
class Hyperparams:
    alpha1: float = 1.0
    alpha2: float = 0.05
    inner_steps_pretrain: int = 1
    pretrain_tasks: int = 8000
    pretrain_meta_batch: int = 4
    cmaml_gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha1", "alpha2"):
            value = getattr(self, name)
            # zero step sizes are accepted so that degenerate runs can be compared
            if not (math.isfinite(value) and value >= 0):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}.")
        if self.inner_steps_pretrain < 1:
            raise ConfigurationError("inner_steps_pretrain must be >= 1.")
        if self.pretrain_tasks < 0:
            raise ConfigurationError("pretrain_tasks must be >= 0.")
        if self.pretrain_meta_batch < 1:
            raise ConfigurationError("pretrain_meta_batch must be >= 1.")
        if math.isnan(self.cmaml_gamma):
            raise ConfigurationError("cmaml_gamma must not be NaN.")

    @property
    def pretrain_iterations(self) -> int:
        return math.ceil(self.pretrain_tasks / self.pretrain_meta_batch)


@dataclass(frozen=True, eq=False)
class LearnerState:
    meta: ParamSet
    det: DetectorParams
    mode: LearnerMode = LearnerMode.LEEDS
    online: ParamSet | None = None
    last_support_loss: float = math.nan
    steps_seen: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", LearnerMode(self.mode))
        except ValueError as err:
            raise ConfigurationError(f"Unknown learner mode: {self.mode!r}") from err
        if self.online is not None and self.online.shape_spec != self.meta.shape_spec:
            raise ConfigurationError("Meta and online parameters must share a layout.")


@dataclass(frozen=True)
class EpisodeOutcome:
    step_index: int
    query_loss: float
    query_accuracy: float
    detected_switch: bool
    detected_ood: bool
    truth_switched: bool
    truth_domain_id: int
    support_loss: float
    branch: Branch


@dataclass(frozen=True, eq=False)
class TaskStart:
    """Parameters the learner adapted from on the first episode of a true task."""

    step_index: int
    task_uid: int
    domain_id: int
    params: ParamSet


@dataclass(eq=False)
class RunRecord:
    mode: LearnerMode
    outcomes: list[EpisodeOutcome] = field(default_factory=list)
    episodes: list[Episode] = field(default_factory=list, repr=False)
    task_starts: list[TaskStart] = field(default_factory=list, repr=False)
    online_params: list[ParamSet] = field(default_factory=list, repr=False)
    meta_params: list[ParamSet] = field(default_factory=list, repr=False)
    final_state: LearnerState | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.outcomes)

    def segments(self) -> list[list[int]]:
        """Step indices grouped by ground-truth task."""
        groups: list[list[int]] = []
        for outcome in self.outcomes:
            if outcome.truth_switched or not groups:
                groups.append([])
            groups[-1].append(outcome.step_index)
        return groups

    def branch_counts(self) -> dict[Branch, int]:
        counts = dict.fromkeys(Branch, 0)
        for outcome in self.outcomes:
            counts[outcome.branch] += 1
        return counts
