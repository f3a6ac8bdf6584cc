"""On-policy adversarial advantage actor-critic pieces.

Trajectory arrays are time-major: ``(T, ...)`` for one rollout or
``(T, n_envs)`` for a vectorized batch.
"""

from __future__ import annotations

import jax
import jax.numpy as jnp

from magics_lab.policies import GaussianPolicy, ValueCritic


def gae_advantages(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimates and value targets.

    ``values`` carries one more entry than ``rewards`` (the bootstrap value of
    the final next state).  ``dones[t]`` marks x_{t+1} as terminal, which
    cuts both the bootstrap and the advantage recursion.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    rewards = jnp.asarray(rewards)
    values = jnp.asarray(values)
    not_done = 1.0 - jnp.asarray(dones, rewards.dtype)
    deltas = rewards + gamma * values[1:] * not_done - values[:-1]

    def back(carry, inp):
        delta, nd = inp
        adv = delta + gamma * lam * nd * carry
        return adv, adv

    _, adv = jax.lax.scan(back, jnp.zeros_like(deltas[0]), (deltas, not_done), reverse=True)
    return adv, adv + values[:-1]


def discounted_returns(rewards, gamma: float, dones=None):
    """Return-to-go G_t = sum_k gamma^k r_{t+k}, restarted after terminal steps."""
    rewards = jnp.asarray(rewards)
    nd = jnp.ones_like(rewards) if dones is None else 1.0 - jnp.asarray(dones, rewards.dtype)

    def back(carry, inp):
        r, n = inp
        g = r + gamma * n * carry
        return g, g

    _, g = jax.lax.scan(back, jnp.zeros_like(rewards[0]), (rewards, nd), reverse=True)
    return g


def a2c_critic_loss(critic: ValueCritic, omega, obs, value_targets):
    """Mean squared error of V_omega against the bootstrapped value targets."""
    return jnp.mean((critic.v(omega, obs) - value_targets) ** 2)


def a2c_surrogate(policy_u: GaussianPolicy, policy_d: GaussianPolicy, theta, psi, obs, z_u, z_d, advantages):
    """Advantage-weighted log-likelihood whose gradients are the policy-gradient estimates."""
    lp_u = policy_u.log_prob_pre(theta, obs, z_u)
    lp_d = policy_d.log_prob_pre(psi, obs, z_d)
    return jnp.mean(advantages * (lp_u + lp_d))


def a2c_actor_objectives(policy_u, policy_d, theta, psi, obs, z_u, z_d, advantages):
    """``(J, dJ/dtheta, dJ/dpsi)`` from stored pre-squash actions and advantages.

    Advantages are treated as constants.  The controller ascends and the
    disturbance descends the same objective.
    """
    advantages = jax.lax.stop_gradient(advantages)
    value, (g_t, g_p) = jax.value_and_grad(
        lambda t, p: a2c_surrogate(policy_u, policy_d, t, p, obs, z_u, z_d, advantages), argnums=(0, 1))(theta, psi)
    return value, g_t, g_p


def critic_partial_grad(critic: ValueCritic, policy: GaussianPolicy, omega, params, traj, gamma: float):
    """Sample estimate of dL/d(actor params) for the mean-square value loss.

    Per trajectory the integrand is::

        -2 * sum_t gamma^t grad log pi(a_t | x_t) * (V_omega(x_0) - V^pi(x_0)) * Q^pi(x_t, u_t, d_t)

    with Q^pi taken as the discounted return-to-go.  The leading minus comes
    from differentiating (V_omega - V^pi)^2 through V^pi: the actor
    parameters enter the loss only via the target.  ``traj`` holds
    trajectory-major arrays: ``obs (M, T, n)``, ``z (M, T, a)`` (this
    player's pre-squash actions), ``rewards (M, T)``, ``v_pi0 (M,)`` and an
    optional ``mask (M, T)`` for ragged episodes.  Passing the controller's
    policy and ``theta`` gives the theta-gradient; the disturbance's policy
    and ``psi`` give the psi-gradient.
    """
    obs, z, rewards = traj["obs"], traj["z"], traj["rewards"]
    mask = traj.get("mask", jnp.ones_like(rewards))
    M, T = rewards.shape
    disc = gamma ** jnp.arange(T, dtype=rewards.dtype)
    q_pi = jax.vmap(lambda r, m: discounted_returns(r * m, gamma))(rewards, mask)
    err0 = critic.v(omega, obs[:, 0]) - traj["v_pi0"]
    weights = jax.lax.stop_gradient(-2.0 * disc[None, :] * err0[:, None] * q_pi * mask)

    def surrogate(p):
        lp = policy.log_prob_pre(p, obs, z)
        return jnp.sum(weights * lp) / M

    return jax.grad(surrogate)(params)
