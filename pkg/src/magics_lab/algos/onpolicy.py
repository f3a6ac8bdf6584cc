"""On-policy adversarial A2C with an optional Stackelberg critic.

Every iteration rolls out ``n_envs`` full episodes, computes GAE targets,
then takes one critic step and one tau-GDA actor step.  In the ``magics``
variant the critic follows ``grad_omega L - h1' z`` where ``h2`` (the
actors' partials of the critic loss) comes from the return-weighted
score-function estimator and ``z`` solves the empirical-Fisher system.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
import optax
from jax.flatten_util import ravel_pytree

from magics_lab.algos.a2c import a2c_critic_loss, a2c_surrogate, critic_partial_grad, gae_advantages
from magics_lab.algos.offpolicy import canonical_variant
from magics_lab.algos.stackelberg import fisher_solve, h1_transpose
from magics_lab.envs import make_env
from magics_lab.policies import GaussianPolicy, ValueCritic, save_checkpoint


@dataclass(frozen=True)
class A2CConfig:
    env: str = "pendulum"
    env_params: dict = field(default_factory=dict)
    variant: str = "magics"
    iterations: int = 500
    n_envs: int = 8
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr_actor: float = 3e-4
    lr_critic: float = 1e-4
    tau_a: float = 2.0
    hidden: tuple = (64, 64)
    fisher_damping: float = 0.1
    fisher_samples: int = 64
    reward_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant("magics" if self.variant == "magics-a2c" else self.variant))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.tau_a < 1:
            raise ValueError("tau_a must be at least 1")

    @property
    def rates(self):
        if self.variant == "baseline":
            return self.lr_actor, self.lr_actor, self.lr_actor
        return self.lr_critic, self.lr_actor, self.tau_a * self.lr_actor


class A2CState(NamedTuple):
    theta: object
    psi: object
    omega: object
    opt_c: object
    opt_u: object
    opt_d: object
    key: jax.Array


class A2CTrainer:
    def __init__(self, cfg: A2CConfig):
        self.cfg = cfg
        self.env = env = make_env(cfg.env, **cfg.env_params)
        self.policy_u = GaussianPolicy(env.obs_dim, env.u_dim, -env.u_max, env.u_max, cfg.hidden)
        self.policy_d = GaussianPolicy(env.obs_dim, env.d_dim, -env.d_max, env.d_max, cfg.hidden)
        self.critic = ValueCritic(env.obs_dim, cfg.hidden)
        lr_c, lr_u, lr_d = cfg.rates
        self.tx_c, self.tx_u, self.tx_d = optax.adam(lr_c), optax.adam(lr_u), optax.adam(lr_d)
        self.iterate = jax.jit(self._iterate)

    def init_state(self) -> A2CState:
        key = jax.random.PRNGKey(self.cfg.seed)
        key, k_u, k_d, k_c = jax.random.split(key, 4)
        theta, psi, omega = self.policy_u.init(k_u), self.policy_d.init(k_d), self.critic.init(k_c)
        return A2CState(theta, psi, omega, self.tx_c.init(omega), self.tx_u.init(theta), self.tx_d.init(psi), key)

    def rollout(self, theta, psi, key):
        """``n_envs`` episodes of ``train_horizon`` steps, trajectory-major."""
        env, T = self.env, self.env.train_horizon

        def episode(k):
            k0, ks = jax.random.split(k)

            def body(carry, kk):
                x, alive = carry
                ku, kd = jax.random.split(kk)
                obs = env.observe(x).astype(jnp.float32)
                u, _, zu = self.policy_u.sample(theta, obs, ku)
                d, _, zd = self.policy_d.sample(psi, obs, kd)
                xn = env.transition(x, u, d)
                r = env.signal(x, u, d, xn) * self.cfg.reward_scale
                failed = env.failed(xn)
                out = {"obs": obs, "z_u": zu, "z_d": zd, "rewards": (r * alive).astype(jnp.float32),
                       "mask": alive.astype(jnp.float32), "dones": failed}
                return (xn, alive * (1.0 - failed)), out

            (x_last, _), traj = jax.lax.scan(body, (env.sample_initial(k0), jnp.ones(())), jax.random.split(ks, T))
            traj["last_obs"] = env.observe(x_last).astype(jnp.float32)
            return traj

        return jax.vmap(episode)(jax.random.split(key, self.cfg.n_envs))

    def _iterate(self, s: A2CState):
        cfg = self.cfg
        key, k_roll, k_fish = jax.random.split(s.key, 3)
        traj = self.rollout(s.theta, s.psi, k_roll)
        M, T = traj["rewards"].shape

        def targets(omega):
            v = self.critic.v(omega, traj["obs"])
            v_last = self.critic.v(omega, traj["last_obs"])
            vals = jnp.concatenate([v, v_last[:, None]], axis=1)
            adv, tgt = jax.vmap(lambda r, vv, d: gae_advantages(r, vv, d, cfg.gamma, cfg.gae_lambda))(
                traj["rewards"], vals, traj["dones"])
            return adv, tgt

        adv, tgt = targets(s.omega)
        tgt = jax.lax.stop_gradient(tgt)
        flat = lambda a: a.reshape(M * T, *a.shape[2:])  # noqa: E731
        obs, z_u, z_d, mask = flat(traj["obs"]), flat(traj["z_u"]), flat(traj["z_d"]), flat(traj["mask"])

        def L(omega):
            return a2c_critic_loss(self.critic, omega, obs, flat(tgt))

        loss, g_w = jax.value_and_grad(L)(s.omega)
        corr_norm = jnp.zeros(())
        if cfg.variant == "magics":
            w0, uw = ravel_pytree(s.omega)
            t0, ut = ravel_pytree(s.theta)
            p0, up = ravel_pytree(s.psi)
            nt = t0.shape[0]
            y = jnp.concatenate([t0, p0])
            tr = {"obs": traj["obs"], "rewards": traj["rewards"], "mask": traj["mask"], "v_pi0": tgt[:, 0]}
            h2 = jnp.concatenate([
                ravel_pytree(critic_partial_grad(self.critic, self.policy_u, s.omega, s.theta,
                                                 {**tr, "z": traj["z_u"]}, cfg.gamma))[0],
                ravel_pytree(critic_partial_grad(self.critic, self.policy_d, s.omega, s.psi,
                                                 {**tr, "z": traj["z_d"]}, cfg.gamma))[0]])

            def J_flat(w, t, p):
                a, _ = targets(uw(w))
                return a2c_surrogate(self.policy_u, self.policy_d, ut(t), up(p), obs, z_u, z_d, flat(a) * mask)

            idx = jax.random.choice(k_fish, M * T, (cfg.fisher_samples,), replace=False)
            a_flat = jax.lax.stop_gradient(flat(adv) * mask)

            def term(yy, i):
                lp = (self.policy_u.log_prob_pre(ut(yy[:nt]), obs[i], z_u[i])
                      + self.policy_d.log_prob_pre(up(yy[nt:]), obs[i], z_d[i]))
                return a_flat[i] * lp

            G = jax.vmap(lambda i: jax.grad(term)(y, i))(idx)
            z = fisher_solve(G, h2, jnp.float32(cfg.fisher_damping), nt)
            corr = h1_transpose(J_flat, w0, y, z, nt)
            corr_norm = jnp.linalg.norm(corr)
            g_w = uw(ravel_pytree(g_w)[0] - corr)

        upd, opt_c = self.tx_c.update(g_w, s.opt_c, s.omega)
        omega = optax.apply_updates(s.omega, upd)
        adv_new, _ = targets(omega)
        a_flat = jax.lax.stop_gradient(flat(adv_new) * mask)
        val, (g_t, g_p) = jax.value_and_grad(
            lambda t, p: a2c_surrogate(self.policy_u, self.policy_d, t, p, obs, z_u, z_d, a_flat), argnums=(0, 1))(
            s.theta, s.psi)
        upd_t, opt_u = self.tx_u.update(jax.tree.map(jnp.negative, g_t), s.opt_u, s.theta)
        upd_p, opt_d = self.tx_d.update(g_p, s.opt_d, s.psi)
        s = A2CState(optax.apply_updates(s.theta, upd_t), optax.apply_updates(s.psi, upd_p), omega,
                     opt_c, opt_u, opt_d, key)
        ep_ret = jnp.sum(traj["rewards"], axis=1).mean() / cfg.reward_scale
        metrics = {"critic_loss": loss, "actor_objective": val, "grad_norm_critic": optax.tree.norm(g_w),
                   "grad_norm_correction": corr_norm, "grad_norm_theta": optax.tree.norm(g_t),
                   "grad_norm_psi": optax.tree.norm(g_p), "episode_return": ep_ret}
        return s, {k: jnp.asarray(v, jnp.float32) for k, v in metrics.items()}


def train_a2c(cfg: A2CConfig, out_dir=None, log: Callable | None = None):
    trainer = A2CTrainer(cfg)
    state = trainer.init_state()
    run_dir = Path(out_dir) if out_dir is not None else None
    records = []
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True, default=list))
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        state, m = trainer.iterate(state)
        m = {k: float(v) for k, v in jax.device_get(m).items()}
        if not (np.isfinite(m["critic_loss"]) and np.isfinite(m["actor_objective"])):
            if run_dir is not None:
                (run_dir / "diagnostic.json").write_text(json.dumps({"iteration": it, **m}, default=str))
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        rec = {"step": it * cfg.n_envs * trainer.env.train_horizon, "iteration": it, **m,
               "wall_time_s": time.perf_counter() - t0}
        records.append(rec)
        if log is not None:
            log(rec)
    if run_dir is not None:
        with open(run_dir / "metrics.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        arch = {"env": cfg.env, "policy_u": trainer.policy_u.describe(), "policy_d": trainer.policy_d.describe(),
                "critic": trainer.critic.describe()}
        save_checkpoint(run_dir / "checkpoint.bin", {"theta": state.theta, "psi": state.psi, "omega1": state.omega},
                        arch, rng_state=state.key, extra={"config": json.loads(json.dumps(asdict(cfg), default=list))})
    return trainer, state, records
