import math
from dataclasses import dataclass, field, replace

import numpy as np

from apps.netcore.exceptions import ConfigurationError


@dataclass(frozen=True)
class TheoryConfig:
    M_clip: float = 2 * math.log(5)
    ell_m: float = 0.0
    ell_p: float = 0.0
    c_support: float | None = None
    rho_target: float = 0.5
    comparator_tol: float = 1e-4
    comparator_lr: float = 0.5
    comparator_max_steps: int = 5000
    calibration_episodes: int = 500
    eval_samples: int = 256

    def __post_init__(self):
        if not self.M_clip > 0:
            raise ConfigurationError(f"M_clip must be > 0, got {self.M_clip}.")
        if not 0 <= self.ell_m <= self.ell_p <= self.M_clip:
            raise ConfigurationError(
                f"Need 0 <= ell_m <= ell_p <= M_clip, got {self.ell_m}, {self.ell_p}, "
                f"{self.M_clip}."
            )
        if self.c_support is not None and not self.c_support > 0:
            raise ConfigurationError("c_support must be > 0.")
        if not 0 < self.rho_target < 1:
            raise ConfigurationError(f"rho_target must lie in (0, 1), got {self.rho_target}.")
        if not (self.comparator_tol > 0 and self.comparator_lr > 0):
            raise ConfigurationError("comparator_tol and comparator_lr must be > 0.")
        if self.comparator_max_steps < 1 or self.calibration_episodes < 2 or self.eval_samples < 1:
            raise ConfigurationError("Step and sample counts must be positive.")

    @classmethod
    def for_classes(cls, n_classes: int, **kwargs) -> "TheoryConfig":
        return cls(M_clip=2 * math.log(n_classes), **kwargs)

    def with_levels(self, ell_m: float, ell_p: float) -> "TheoryConfig":
        return replace(self, ell_m=ell_m, ell_p=ell_p)

    @property
    def gap(self) -> float:
        return self.ell_p - self.ell_m

    def auto_c(self) -> float:
        """Smallest integer constant above 4 M^2 / gap^2."""
        if self.gap <= 0:
            return math.inf
        return math.ceil(4 * self.M_clip**2 / self.gap**2) + 1

    def support_constant(self) -> float:
        return self.auto_c() if self.c_support is None else self.c_support

    def support_size(self, n_rounds: int) -> int:
        """S = c log R, at least one sample."""
        c = self.support_constant()
        if math.isinf(c):
            raise ConfigurationError(
                "Support constant is unbounded; set ell_m < ell_p or c_support."
            )
        return max(1, math.ceil(c * math.log(max(n_rounds, 1))))


@dataclass(frozen=True, eq=False)
class QuadTask:
    """f(phi) = 0.5 (phi - center)^T diag(curvature) (phi - center)."""

    center: np.ndarray
    curvature: np.ndarray

    def __post_init__(self):
        center = np.array(self.center, dtype=np.float64).reshape(-1)
        curvature = np.array(self.curvature, dtype=np.float64).reshape(-1)
        if center.shape != curvature.shape:
            raise ConfigurationError("center and curvature must have the same length.")
        if np.any(curvature <= 0):
            raise ConfigurationError("Curvatures must be > 0.")
        center.setflags(write=False)
        curvature.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "curvature", curvature)

    @property
    def dim(self) -> int:
        return self.center.size

    def loss(self, phi: np.ndarray) -> float:
        diff = phi - self.center
        return 0.5 * float(np.sum(self.curvature * diff * diff))

    def grad(self, phi: np.ndarray) -> np.ndarray:
        return self.curvature * (phi - self.center)

    def gd_step(self, phi: np.ndarray, alpha: float) -> np.ndarray:
        return phi - alpha * self.grad(phi)

    def sample_losses(self, phi: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Per-sample losses 0.5 (phi - xi)^T H (phi - xi) for rows of ``xi``."""
        diff = phi - xi
        return 0.5 * np.sum(self.curvature * diff * diff, axis=1)


@dataclass(frozen=True, eq=False)
class QuadTaskFamily:
    dim: int
    tasks: tuple[QuadTask, ...]
    mu: float
    beta: float
    alpha: float
    K_per_task: tuple[int, ...]
    noise_sigma: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "K_per_task", tuple(int(k) for k in self.K_per_task))
        if not 0 < self.mu <= self.beta:
            raise ConfigurationError(f"Need 0 < mu <= beta, got {self.mu}, {self.beta}.")
        if not 0 < self.alpha <= 2 / self.beta:
            raise ConfigurationError(f"alpha must lie in (0, 2/beta], got {self.alpha}.")
        if len(self.tasks) != len(self.K_per_task) or not self.tasks:
            raise ConfigurationError("Need one K_t per task and at least one task.")
        if any(k < 1 for k in self.K_per_task):
            raise ConfigurationError("Every task needs K_t >= 1.")
        for task in self.tasks:
            if task.dim != self.dim:
                raise ConfigurationError("Task dimension does not match the family.")
            if np.any(task.curvature < self.mu) or np.any(task.curvature > self.beta):
                raise ConfigurationError("Task curvature outside [mu, beta].")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0.")

    @property
    def centers(self) -> np.ndarray:
        return np.vstack([task.center for task in self.tasks])

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_rounds(self) -> int:
        return sum(self.K_per_task)

    @property
    def rho(self) -> float:
        return max(abs(1 - self.alpha * self.mu), abs(1 - self.alpha * self.beta))

    def truncated(self, n_tasks: int) -> "QuadTaskFamily":
        """The first ``n_tasks`` tasks with their segment lengths."""
        if not 1 <= n_tasks <= self.n_tasks:
            raise ConfigurationError(f"n_tasks must lie in [1, {self.n_tasks}], got {n_tasks}.")
        return replace(self, tasks=self.tasks[:n_tasks], K_per_task=self.K_per_task[:n_tasks])


@dataclass
class RegretReport:
    tar: float
    sigma_star_sq: float
    phi_star_mean: np.ndarray
    per_task_regret: list[float]
    bound_value: float
    initial_gaps: list[float] = field(default_factory=list)
    distance_bound: float = math.nan
    detection_error_rate: float = math.nan
    n_tasks: int = 0
    n_rounds: int = 0


@dataclass(frozen=True)
class TheoryCheck:
    name: str
    measured: float
    target: float
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class DetectionErrorReport:
    """Outcome of thresholding clipped support losses at the level midpoint."""

    support_size: int
    trials: int
    misses: int
    false_alarms: int
    ell_m: float
    ell_p: float
    threshold: float
    bound: float

    @property
    def rate(self) -> float:
        return (self.misses + self.false_alarms) / self.trials

    @property
    def slack(self) -> float:
        """Three Monte-Carlo standard deviations of a rate at the bound."""
        return 3 * math.sqrt(self.bound / self.trials)

    @property
    def within_bound(self) -> bool:
        return self.rate <= self.bound + self.slack
