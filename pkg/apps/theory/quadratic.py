"""
Diagonal quadratic task families.

Each task is a strongly convex quadratic with curvature spectrum in
``[mu, beta]``; one gradient step with ``alpha`` in ``(0, 2/beta]`` is a
contraction towards the task centre with modulus ``max(|1-alpha*mu|, |1-alpha*beta|)``.
"""

import numpy as np

from apps.netcore.exceptions import ArgumentError

from .types import QuadTask, QuadTaskFamily


def closed_form_rho(mu: float, beta: float, alpha: float) -> float:
    return max(abs(1 - alpha * mu), abs(1 - alpha * beta))


def alpha_for_rho(mu: float, beta: float, rho: float) -> float:
    """Step size whose contraction modulus is ``rho`` (clamped to the best achievable)."""
    best = (beta - mu) / (beta + mu)
    if rho <= best:
        return 2 / (mu + beta)
    return (1 - rho) / mu


def random_spectrum(dim: int, mu: float, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Diagonal curvature in [mu, beta] that always contains both endpoints."""
    spectrum = rng.uniform(mu, beta, size=dim)
    spectrum[0] = mu
    if dim > 1:
        spectrum[1] = beta
    return spectrum


def make_quad_family(
    dim: int,
    n_tasks: int,
    spread: float,
    rng: np.random.Generator,
    mu: float = 1.0,
    beta: float = 2.0,
    alpha: float | None = None,
    rho: float = 0.5,
    p_stay: float = 0.8,
    noise_sigma: float = 0.5,
    base_center: np.ndarray | None = None,
) -> QuadTaskFamily:
    """
    Tasks with centres ``base + spread * N(0, I)`` and geometric segment lengths.

    ``K_t`` follows the stream's stay probability: ``K_t - 1`` is geometric
    with success probability ``1 - p_stay``.
    """
    if n_tasks < 1 or dim < 1:
        raise ArgumentError("Need n_tasks >= 1 and dim >= 1.")
    if spread < 0:
        raise ArgumentError("spread must be >= 0.")
    if alpha is None:
        alpha = alpha_for_rho(mu, beta, rho)

    base = np.zeros(dim) if base_center is None else np.asarray(base_center, dtype=np.float64)
    tasks = tuple(
        QuadTask(
            center=base + spread * rng.normal(size=dim),
            curvature=random_spectrum(dim, mu, beta, rng),
        )
        for _ in range(n_tasks)
    )
    lengths = rng.geometric(1.0 - p_stay, size=n_tasks)
    return QuadTaskFamily(
        dim=dim,
        tasks=tasks,
        mu=mu,
        beta=beta,
        alpha=alpha,
        K_per_task=tuple(lengths),
        noise_sigma=noise_sigma,
    )


def contraction_ratio(
    mu: float,
    beta: float,
    alpha: float,
    trials: int,
    rng: np.random.Generator,
    dim: int = 4,
) -> tuple[float, float]:
    """
    Largest observed ``|U(a) - U(b)| / |a - b|`` for the gradient-step map.

    Every trial draws a fresh diagonal quadratic; random pairs are complemented
    by pairs differing along each eigen-axis, where the ratio is attained.
    """
    if not 0 < alpha <= 2 / beta:
        raise ArgumentError(f"alpha must lie in (0, 2/beta], got {alpha}.")
    if trials < 1:
        raise ArgumentError("trials must be >= 1.")

    empirical = 0.0
    for _ in range(trials):
        task = QuadTask(center=rng.normal(size=dim), curvature=random_spectrum(dim, mu, beta, rng))
        a = rng.normal(size=dim)
        partners = [rng.normal(size=dim)] + [a + np.eye(dim)[i] for i in range(dim)]
        for b in partners:
            step_gap = np.linalg.norm(task.gd_step(a, alpha) - task.gd_step(b, alpha))
            empirical = max(empirical, step_gap / np.linalg.norm(a - b))
    return float(empirical), closed_form_rho(mu, beta, alpha)


def contraction_trace(task: QuadTask, alpha: float, phi0: np.ndarray, steps: int) -> np.ndarray:
    """Distances ``|phi^k - center|`` for k = 0..steps."""
    phi = np.asarray(phi0, dtype=np.float64)
    distances = [np.linalg.norm(phi - task.center)]
    for _ in range(steps):
        phi = task.gd_step(phi, alpha)
        distances.append(np.linalg.norm(phi - task.center))
    return np.array(distances)


def gradient_lipschitz_ratio(task: QuadTask, rng: np.random.Generator, trials: int = 100) -> float:
    """Largest observed ``|grad f(a) - grad f(b)| / |a - b|``; never exceeds max curvature."""
    worst = 0.0
    for _ in range(trials):
        a, b = rng.normal(size=(2, task.dim))
        worst = max(worst, np.linalg.norm(task.grad(a) - task.grad(b)) / np.linalg.norm(a - b))
    return float(worst)
