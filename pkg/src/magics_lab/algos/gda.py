"""tau-GDA: simultaneous ascent for the controller, tau-scaled descent for the disturbance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from magics_lab.algos.schedules import LearningRateSchedule

DIVERGENCE_BOUND = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, message, iteration=None, theta=None, psi=None):
        super().__init__(message)
        self.iteration = iteration
        self.theta = theta
        self.psi = psi


@dataclass
class GdaResult:
    theta: np.ndarray
    psi: np.ndarray
    iterations: int
    converged: bool


def tau_gda_step(theta, psi, g_theta, g_psi, lr: float, tau: float):
    return theta + lr * g_theta, psi - lr * tau * g_psi


def tau_gda(grad_fn: Callable, theta0, psi0, schedule: LearningRateSchedule | float, tau: float,
            eps_u: float = 1e-6, eps_d: float = 1e-6, max_iter: int = 100_000,
            bound: float = DIVERGENCE_BOUND) -> GdaResult:
    """Run tau-GDA on ``grad_fn(theta, psi) -> (dJ/dtheta, dJ/dpsi)`` until both norms fall below
    their thresholds or ``max_iter`` is reached.

    Raises DivergenceError once ``||(theta, psi)||`` exceeds ``bound``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not isinstance(schedule, LearningRateSchedule):
        schedule = LearningRateSchedule("constant", float(schedule))
    theta = np.array(theta0, dtype=float)
    psi = np.array(psi0, dtype=float)
    for i in range(max_iter):
        g_t, g_p = grad_fn(theta, psi)
        g_t, g_p = np.asarray(g_t, float), np.asarray(g_p, float)
        if np.linalg.norm(g_t) <= eps_u and np.linalg.norm(g_p) <= eps_d:
            return GdaResult(theta, psi, i, True)
        theta, psi = tau_gda_step(theta, psi, g_t, g_p, schedule(i), tau)
        norm = np.sqrt(theta @ theta + psi @ psi)
        if not np.isfinite(norm) or norm > bound:
            raise DivergenceError(f"tau-GDA diverged at iteration {i + 1} (|y| = {norm:.3g})",
                                  i + 1, theta, psi)
    return GdaResult(theta, psi, max_iter, False)
