"""The critic's Stackelberg gradient.

The critic leads both actors, so its update direction accounts for how the
actors' equilibrium moves with the critic parameters::

    D_omega L = grad_omega L - h1' H^-1 h2

with ``h1 = d(grad_y J)/d omega``, ``h2 = grad_y L`` and ``H = d2J/dy2`` over
the stacked actor parameters ``y = (theta, psi)``.  ``H z = h2`` is solved
once and ``h1' z`` is then one more reverse pass, never a materialized
``h1``.

Two ways to obtain ``H``: ``exact`` assembles the dense Hessian and solves
directly; ``empirical_fisher`` replaces it by damped averaged outer products
of per-sample gradients of ``J``, with the controller block negated because
the controller maximizes ``J``.  That solve goes through the Woodbury
identity in an ``N x N`` system, ``N`` the number of samples.
"""

from __future__ import annotations

from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from magics_lab.diffcore import DEFAULT_HESSIAN_CAP, HessianTooLargeError, SingularSystemError, solve_linear

MODES = ("exact", "empirical_fisher")
DEFAULT_FISHER_DAMPING = 1e-3
EXACT_RETRY_DAMPING = 1e-6


def _split(y, n_theta):
    return y[:n_theta], y[n_theta:]


def h1_transpose(J, omega, y, z, n_theta):
    """h1' z = grad_omega <grad_y J(omega, y), z>."""
    def inner(w):
        g = jax.grad(lambda yy: J(w, *_split(yy, n_theta)))(y)
        return jnp.vdot(g, z)
    return jax.grad(inner)(omega)


def h2_vector(L, omega, y, n_theta):
    return jax.grad(lambda yy: L(omega, *_split(yy, n_theta)))(y)


def actor_hessian(J, omega, y, n_theta):
    return jax.hessian(lambda yy: J(omega, *_split(yy, n_theta)))(y)


def fisher_solve(G, rhs, damping, n_theta):
    """Solve ``S (G'G/N + damping I) z = rhs`` with ``S = diag(-I_theta, I_psi)``."""
    n = G.shape[0]
    sign = jnp.concatenate([-jnp.ones(n_theta, rhs.dtype), jnp.ones(rhs.shape[0] - n_theta, rhs.dtype)])
    w = sign * rhs
    small = n * damping * jnp.eye(n, dtype=G.dtype) + G @ G.T
    return (w - G.T @ jnp.linalg.solve(small, G @ w)) / damping


def total_derivative_exact_jax(L, J, omega, theta, psi, damping=0.0):
    """Jittable exact-mode total derivative on flat vectors (no singularity checks)."""
    n_theta = theta.shape[0]
    y = jnp.concatenate([theta, psi])
    H = actor_hessian(J, omega, y, n_theta)
    H = 0.5 * (H + H.T) + damping * jnp.eye(y.shape[0], dtype=y.dtype)
    z = jnp.linalg.solve(H, h2_vector(L, omega, y, n_theta))
    return jax.grad(L, argnums=0)(omega, theta, psi) - h1_transpose(J, omega, y, z, n_theta)


def total_derivative_fisher_jax(L, J, J_per_sample, omega, theta, psi, damping=DEFAULT_FISHER_DAMPING):
    """Jittable empirical-Fisher total derivative on flat vectors."""
    n_theta = theta.shape[0]
    y = jnp.concatenate([theta, psi])
    G = jax.jacrev(lambda yy: J_per_sample(omega, *_split(yy, n_theta)))(y)
    z = fisher_solve(G, h2_vector(L, omega, y, n_theta), damping, n_theta)
    return jax.grad(L, argnums=0)(omega, theta, psi) - h1_transpose(J, omega, y, z, n_theta)


def stackelberg_total_derivative(L: Callable, J: Callable, omega, theta, psi, mode: str = "exact",
                                 damping: float | None = None, J_per_sample: Callable | None = None,
                                 retry_damping: float | None = None,
                                 cap: int = DEFAULT_HESSIAN_CAP) -> np.ndarray:
    """Total derivative of the critic loss ``L(omega, theta, psi)`` through the actors' response.

    ``J(omega, theta, psi)`` is the actors' objective.  In ``empirical_fisher``
    mode ``J_per_sample`` returns the per-sample terms whose mean is ``J``.
    Exact mode with zero damping raises :class:`SingularSystemError` on a
    singular ``H`` unless ``retry_damping`` is given.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    omega, theta, psi = (jnp.asarray(a, jnp.float64) for a in (omega, theta, psi))
    n_theta = theta.shape[0]
    y = jnp.concatenate([theta, psi])
    grad_omega = jax.grad(L, argnums=0)(omega, theta, psi)
    h2 = h2_vector(L, omega, y, n_theta)
    if mode == "exact":
        if y.shape[0] > cap:
            raise HessianTooLargeError(f"actor Hessian would be {y.shape[0]}x{y.shape[0]} (cap {cap})")
        H = np.asarray(actor_hessian(J, omega, y, n_theta))
        H = 0.5 * (H + H.T)
        damping = 0.0 if damping is None else damping
        try:
            z = solve_linear(H, np.asarray(h2), damping)
        except SingularSystemError:
            if retry_damping is None:
                raise
            z = solve_linear(H, np.asarray(h2), damping + retry_damping)
    else:
        if J_per_sample is None:
            raise ValueError("empirical_fisher mode needs J_per_sample")
        damping = DEFAULT_FISHER_DAMPING if damping is None else damping
        if damping <= 0:
            raise ValueError("empirical_fisher mode needs positive damping")
        G = jax.jacrev(lambda yy: J_per_sample(omega, *_split(yy, n_theta)))(y)
        z = fisher_solve(G, h2, damping, n_theta)
    out = np.asarray(grad_omega - h1_transpose(J, omega, y, jnp.asarray(z), n_theta))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Stackelberg gradient")
    return out


def chunked_actor_hessian(J, omega, y, n_theta, batch_size: int = 256):
    """Dense actor Hessian assembled column block by column block from HVPs.

    Peak memory stays at the Hessian itself plus one block of columns, which
    is what makes exact mode feasible for networks with thousands of weights.
    """
    g = jax.grad(lambda yy: J(omega, *_split(yy, n_theta)))

    def column(i):
        e = jnp.zeros_like(y).at[i].set(1.0)
        return jax.jvp(g, (y,), (e,))[1]

    H = jax.lax.map(column, jnp.arange(y.shape[0]), batch_size=batch_size)
    return 0.5 * (H + H.T)
