"""Critic-leader training on analytic games with exact gradients.

Each iteration takes one critic step along the Stackelberg total derivative
(or the plain partial gradient for the ablation and baseline variants) and
one tau-GDA step for the actors, both with decreasing step sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from magics_lab.algos.gda import DivergenceError
from magics_lab.algos.offpolicy import canonical_variant
from magics_lab.algos.schedules import LearningRateSchedule
from magics_lab.algos.stackelberg import total_derivative_exact_jax
from magics_lab.games import DseCertificate, TrilevelQuadraticGame, verify_dse


@dataclass(frozen=True)
class GameTrainConfig:
    variant: str = "magics"
    critic_schedule: LearningRateSchedule = LearningRateSchedule("polynomial", 2.0, 1000.0, 0.6)
    actor_schedule: LearningRateSchedule = LearningRateSchedule("polynomial", 5.0, 1000.0, 0.51)
    tau_a: float = 2.0
    max_iter: int = 100_000
    eps_c: float = 1e-3
    eps_u: float = 1e-3
    eps_d: float = 1e-3
    log_every: int = 1000
    bound: float = 1e6

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.tau_a < 1:
            raise ValueError("tau_a must be at least 1")


@dataclass
class GameTrainResult:
    omega: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    iterations: int
    converged: bool
    diverged: bool
    metrics: list = field(default_factory=list)
    certificate: DseCertificate | None = None


def _step_fn(L: Callable, J: Callable, cfg: GameTrainConfig):
    crit, act = cfg.critic_schedule, cfg.actor_schedule
    tau = cfg.tau_a
    if cfg.variant == "baseline":
        crit, tau = act, 1.0

    def critic_dir(w, t, p):
        if cfg.variant == "magics":
            return total_derivative_exact_jax(L, J, w, t, p)
        return jax.grad(L, argnums=0)(w, t, p)

    def step(carry):
        k, w, t, p = carry[:4]
        d_w = critic_dir(w, t, p)
        w = w - crit(k) * d_w
        g_t, g_p = jax.grad(J, argnums=(1, 2))(w, t, p)
        t = t + act(k) * g_t
        p = p - act(k) * tau * g_p
        norms = jnp.stack([jnp.linalg.norm(d_w), jnp.linalg.norm(g_t), jnp.linalg.norm(g_p)])
        return k + 1, w, t, p, norms

    return step


def train_game(L: Callable, J: Callable, omega0, theta0, psi0, cfg: GameTrainConfig = GameTrainConfig()) -> GameTrainResult:
    """Run until the convergence thresholds hold, the iteration budget ends, or the iterates blow up.

    Convergence means ``|D_omega L| <= eps_c``, ``|grad_theta J| <= eps_u``
    and ``|grad_psi J| <= eps_d`` at the current iterate (the critic norm uses
    the variant's own critic direction).
    """
    step = _step_fn(L, J, cfg)
    eps = jnp.asarray([cfg.eps_c, cfg.eps_u, cfg.eps_d])

    def block(carry, n):
        def cond(c):
            k, w, t, p, norms = c
            size = jnp.linalg.norm(jnp.concatenate([w, t, p]))
            return (k < n) & ~jnp.all(norms <= eps) & (size <= cfg.bound) & jnp.all(jnp.isfinite(norms))
        return jax.lax.while_loop(cond, step, carry)

    run = jax.jit(block)
    w, t, p = (jnp.asarray(a, jnp.float64) for a in (omega0, theta0, psi0))
    carry = (jnp.zeros((), jnp.int64), w, t, p, jnp.full((3,), 1e30))
    metrics = []
    converged = diverged = False
    while True:
        target = min(int(carry[0]) + cfg.log_every, cfg.max_iter)
        carry = run(carry, target)
        k, w, t, p, norms = carry
        norms_np = np.asarray(norms)
        metrics.append({"step": int(k), "grad_norm_critic": float(norms_np[0]),
                        "grad_norm_theta": float(norms_np[1]), "grad_norm_psi": float(norms_np[2])})
        size = float(jnp.linalg.norm(jnp.concatenate([w, t, p])))
        if not np.all(np.isfinite(norms_np)) or size > cfg.bound:
            diverged = True
            break
        if np.all(norms_np <= np.asarray(eps)):
            converged = True
            break
        if int(k) >= cfg.max_iter:
            break
    return GameTrainResult(np.asarray(w), np.asarray(t), np.asarray(p), int(carry[0]), converged, diverged, metrics)


def magics_train_game(game: TrilevelQuadraticGame, cfg: GameTrainConfig = GameTrainConfig(), omega0=None,
                      theta0=None, psi0=None, eps_certificate: float = 1e-4, raise_on_divergence: bool = False):
    """Train on a trilevel quadratic game from the origin (by default) and certify the end point."""
    omega0 = np.zeros(game.n_omega) if omega0 is None else omega0
    theta0 = np.zeros(game.n_theta) if theta0 is None else theta0
    psi0 = np.zeros(game.n_psi) if psi0 is None else psi0
    res = train_game(game.L, game.J, omega0, theta0, psi0, cfg)
    if res.diverged and raise_on_divergence:
        raise DivergenceError("iterates left the bounded region", res.iterations, res.theta, res.psi)
    if not res.diverged:
        w = jnp.asarray(res.omega)
        res.certificate = verify_dse(lambda t, p: game.J(w, t, p), res.theta, res.psi, eps_certificate)
    return res
