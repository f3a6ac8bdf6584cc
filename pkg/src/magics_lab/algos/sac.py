"""Soft adversarial actor-critic objectives.

The critic regresses Q(x, u, d) onto r + gamma Q_target(x', u', d') with the
next actions drawn from the current actors, so the loss depends on the
actor parameters (that dependence is what the Stackelberg correction
differentiates).  The controller ascends and the disturbance descends the
entropy-regularized objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp

from magics_lab.policies import GaussianPolicy, TwinQCritic


@dataclass(frozen=True)
class ActorCriticNets:
    policy_u: GaussianPolicy
    policy_d: GaussianPolicy
    critic: TwinQCritic


@dataclass(frozen=True)
class Temperatures:
    eta_u: float
    eta_d: float
    h0_u: float
    h0_d: float


def sac_critic_loss(nets: ActorCriticNets, q1, q2, theta, psi, batch, key, gamma):
    """Mean of (Q1(x,u,d) - r - gamma Q2(x',u',d'))^2 with u', d' drawn at x'.

    Transitions flagged ``failed`` are terminal and do not bootstrap.
    """
    k_u, k_d = jax.random.split(key)
    u_next, _, _ = nets.policy_u.sample(theta, batch["next_obs"], k_u)
    d_next, _, _ = nets.policy_d.sample(psi, batch["next_obs"], k_d)
    live = 1.0 - batch["failed"].astype(batch["signal"].dtype) if "failed" in batch else 1.0
    target = batch["signal"] + gamma * live * nets.critic.q(q2, batch["next_obs"], u_next, d_next)
    pred = nets.critic.q(q1, batch["obs"], batch["u"], batch["d"])
    return jnp.mean((pred - target) ** 2)


def sac_actor_terms(nets: ActorCriticNets, critic_params, theta, psi, obs, key, temps: Temperatures):
    """Per-state terms of the entropy-regularized objective; their mean is J."""
    k_u, k_d = jax.random.split(key)
    u, lp_u, _ = nets.policy_u.sample(theta, obs, k_u)
    d, lp_d, _ = nets.policy_d.sample(psi, obs, k_d)
    q = jnp.minimum(nets.critic.q(critic_params["q1"], obs, u, d), nets.critic.q(critic_params["q2"], obs, u, d))
    return q - temps.eta_u * (lp_u - temps.h0_u) + temps.eta_d * (lp_d - temps.h0_d)


def sac_actor_objective(nets: ActorCriticNets, critic_params, theta, psi, obs, key, temps: Temperatures):
    """``(J, dJ/dtheta, dJ/dpsi)``; the controller ascends J and the disturbance descends it."""
    def J(t, p):
        return jnp.mean(sac_actor_terms(nets, critic_params, t, p, obs, key, temps))
    value, (g_t, g_p) = jax.value_and_grad(J, argnums=(0, 1))(theta, psi)
    return value, g_t, g_p


def temperature_update(eta, current_entropy, target_entropy, lr):
    """One gradient step on log(eta): shrinks eta while entropy exceeds the target."""
    return jnp.exp(jnp.log(eta) - lr * (current_entropy - target_entropy))


class SacObjectives:
    """Critic loss and actor terms for reward-maximizing adversarial SAC."""

    name = "sac"

    def critic_loss(self, nets, q1, q2, theta, psi, batch, key, gamma):
        return sac_critic_loss(nets, q1, q2, theta, psi, batch, key, gamma)

    def actor_terms(self, nets, critic_params, theta, psi, obs, key, temps):
        return sac_actor_terms(nets, critic_params, theta, psi, obs, key, temps)
