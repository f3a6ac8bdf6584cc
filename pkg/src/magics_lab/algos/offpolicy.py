"""Jitted off-policy adversarial actor-critic training.

Each scan step collects one transition with the current actors, stores it,
and after the warm-up runs one critic step followed by ``k_actor`` actor
steps.  The critic objective and the actor terms come from an objectives
object (:class:`~magics_lab.algos.sac.SacObjectives` for reward games, the
Isaacs objectives for safety), so the orchestration is written once.

Variants:

* ``magics``: critic follows the Stackelberg total derivative, actors run
  tau-GDA with the disturbance at ``tau_a`` times the controller rate.
* ``ablation``: plain critic gradient, same rates as ``magics``.
* ``baseline``: plain critic gradient, every rate equal to ``lr_actor``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
import optax
from jax.flatten_util import ravel_pytree

from magics_lab.algos.buffer import BufferState, buffer_add, buffer_init, buffer_sample, transition_spec
from magics_lab.algos.sac import ActorCriticNets, SacObjectives, Temperatures
from magics_lab.algos.stackelberg import chunked_actor_hessian, fisher_solve, h1_transpose, h2_vector
from magics_lab.envs import make_env
from magics_lab.policies import GaussianPolicy, TwinQCritic, entropy_estimate, polyak, save_checkpoint

VARIANTS = ("magics", "ablation", "baseline")
VARIANT_ALIASES = {"magics-sac": "magics", "magics-safety": "magics"}
TIMING_FIELDS = ("wall_time_s", "wall_time_per_step")


def canonical_variant(name: str) -> str:
    v = VARIANT_ALIASES.get(name, name)
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS + tuple(VARIANT_ALIASES)}")
    return v


@dataclass(frozen=True)
class OffPolicyConfig:
    env: str = "pendulum"
    env_params: dict = field(default_factory=dict)
    objective: str = "sac"
    variant: str = "magics"
    total_steps: int = 300_000
    warmup: int = 1000
    batch_size: int = 256
    buffer_size: int = 300_000
    gamma: float = 0.99
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    tau_a: float = 2.0
    k_actor: int = 1
    polyak: float = 0.005
    hidden: tuple = (64, 64)
    eta_u: float = 0.2
    eta_d: float = 0.2
    learn_temperature: bool = True
    lr_temperature: float = 3e-4
    stackelberg_mode: str = "empirical_fisher"
    fisher_damping: float = 1e-3
    fisher_samples: int = 64
    chunk_steps: int = 1000
    horizon: int = 0
    seed: int = 0
    freeze_controller: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.tau_a < 1:
            raise ValueError("tau_a must be at least 1")
        if self.eta_u <= 0 or self.eta_d <= 0:
            raise ValueError("temperatures must be positive")
        if self.stackelberg_mode not in ("exact", "empirical_fisher"):
            raise ValueError(f"unknown stackelberg_mode {self.stackelberg_mode!r}")
        if self.fisher_samples > self.batch_size:
            raise ValueError("fisher_samples cannot exceed batch_size")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {sorted(OBJECTIVES)}")

    @property
    def rates(self) -> tuple[float, float, float]:
        """(critic, controller, disturbance) learning rates after applying the variant."""
        if self.variant == "baseline":
            return self.lr_actor, self.lr_actor, self.lr_actor
        return self.lr_critic, self.lr_actor, self.tau_a * self.lr_actor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _isaacs_objectives():
    from magics_lab.safety import IsaacsObjectives
    return IsaacsObjectives()


OBJECTIVES: dict[str, Callable] = {"sac": SacObjectives, "isaacs": _isaacs_objectives}


class TrainState(NamedTuple):
    x: jax.Array
    t: jax.Array
    ep_ret: jax.Array
    theta: Any
    psi: Any
    q1: Any
    q2: Any
    opt_c: Any
    opt_u: Any
    opt_d: Any
    log_eta_u: jax.Array
    log_eta_d: jax.Array
    buffer: BufferState
    key: jax.Array
    step: jax.Array


METRIC_KEYS = ("critic_loss", "actor_objective", "grad_norm_critic", "grad_norm_correction",
               "grad_norm_theta", "grad_norm_psi", "entropy_u", "entropy_d", "eta_u", "eta_d")


def build_nets(env, hidden) -> ActorCriticNets:
    pu = GaussianPolicy(env.obs_dim, env.u_dim, -env.u_max, env.u_max, hidden)
    pd = GaussianPolicy(env.obs_dim, env.d_dim, -env.d_max, env.d_max, hidden)
    return ActorCriticNets(pu, pd, TwinQCritic(env.obs_dim, env.u_dim, env.d_dim, hidden))


class OffPolicyTrainer:
    """Holds the jitted chunk runner for one configuration."""

    def __init__(self, cfg: OffPolicyConfig):
        self.cfg = cfg
        self.env = make_env(cfg.env, **cfg.env_params)
        self.nets = build_nets(self.env, cfg.hidden)
        self.objectives = OBJECTIVES[cfg.objective]()
        self.horizon = cfg.horizon or self.env.train_horizon
        lr_c, lr_u, lr_d = cfg.rates
        self.tx_c, self.tx_u, self.tx_d = optax.adam(lr_c), optax.adam(lr_u), optax.adam(lr_d)
        self.h0_u, self.h0_d = float(self.env.u_dim), float(self.env.d_dim)
        self._chunk = jax.jit(self._run_chunk, static_argnums=1)
        self.update = jax.jit(self._update)

    # -- state ---------------------------------------------------------------

    def init_state(self, init_params: dict | None = None) -> TrainState:
        cfg, env, nets = self.cfg, self.env, self.nets
        key = jax.random.PRNGKey(cfg.seed)
        key, k_u, k_d, k_q, k_x = jax.random.split(key, 5)
        theta = nets.policy_u.init(k_u)
        psi = nets.policy_d.init(k_d)
        q = nets.critic.init(k_q)
        q1, q2 = q["q1"], q["q2"]
        if init_params:
            theta = init_params.get("theta", theta)
            psi = init_params.get("psi", psi)
            q1 = init_params.get("omega1", q1)
            q2 = init_params.get("omega2", q2)
        buf = buffer_init(cfg.buffer_size, transition_spec(env.obs_dim, env.u_dim, env.d_dim))
        return TrainState(
            x=env.sample_initial(k_x), t=jnp.zeros((), jnp.int32), ep_ret=jnp.zeros(()),
            theta=theta, psi=psi, q1=q1, q2=q2,
            opt_c=self.tx_c.init(q1), opt_u=self.tx_u.init(theta), opt_d=self.tx_d.init(psi),
            log_eta_u=jnp.log(jnp.float32(cfg.eta_u)), log_eta_d=jnp.log(jnp.float32(cfg.eta_d)),
            buffer=buf, key=key, step=jnp.zeros((), jnp.int32))

    # -- one environment step ------------------------------------------------

    def _collect(self, s: TrainState, key):
        env, nets, cfg = self.env, self.nets, self.cfg
        k_a, k_b, k_u, k_d, k_r = jax.random.split(key, 5)
        obs = env.observe(s.x).astype(jnp.float32)
        u_pol, _, _ = nets.policy_u.sample(s.theta, obs, k_u)
        d_pol, _, _ = nets.policy_d.sample(s.psi, obs, k_d)
        warm = s.step < cfg.warmup
        u_rand = jax.random.uniform(k_a, (env.u_dim,), jnp.float32, -env.u_max, env.u_max)
        d_rand = jax.random.uniform(k_b, (env.d_dim,), jnp.float32, -env.d_max, env.d_max)
        if cfg.freeze_controller:
            # a frozen controller keeps acting with its own policy during warm-up
            u = u_pol
        else:
            u = jnp.where(warm, u_rand, u_pol)
        d = jnp.where(warm, d_rand, d_pol)
        x_next = env.transition(s.x, u, d)
        signal = env.signal(s.x, u, d, x_next)
        failed = env.failed(x_next)
        buf = buffer_add(s.buffer, {"obs": obs, "u": u, "d": d, "signal": signal,
                                    "next_obs": env.observe(x_next), "failed": failed})
        t = s.t + 1
        done = failed | (t >= self.horizon)
        ep_ret = s.ep_ret + signal
        finished = jnp.where(done, ep_ret, jnp.nan)
        x = jnp.where(done, env.sample_initial(k_r), x_next)
        s = s._replace(x=x, t=jnp.where(done, 0, t), ep_ret=jnp.where(done, 0.0, ep_ret), buffer=buf)
        return s, {"episode_return": finished, "failed": failed}

    # -- one learning step ---------------------------------------------------

    def _critic_direction(self, s: TrainState, batch, temps, k_c, k_j):
        """Critic descent direction for the configured variant, plus the correction norm."""
        cfg, nets, obj = self.cfg, self.nets, self.objectives
        w0, unravel_w = ravel_pytree(s.q1)
        t0, unravel_t = ravel_pytree(s.theta)
        p0, unravel_p = ravel_pytree(s.psi)
        nt = t0.shape[0]

        def L(w, t, p):
            return obj.critic_loss(nets, unravel_w(w), s.q2, unravel_t(t), unravel_p(p), batch, k_c, cfg.gamma)

        loss, g_w = jax.value_and_grad(L)(w0, t0, p0)
        if cfg.variant != "magics":
            return loss, unravel_w(g_w), jnp.zeros(())

        obs = batch["obs"]
        keys = jax.random.split(k_j, obs.shape[0])

        def term(w, t, p, o, k):
            cp = {"q1": unravel_w(w), "q2": s.q2}
            return obj.actor_terms(nets, cp, unravel_t(t), unravel_p(p), o[None], k, temps)[0]

        def J(w, t, p):
            return jnp.mean(jax.vmap(term, (None, None, None, 0, 0))(w, t, p, obs, keys))

        y = jnp.concatenate([t0, p0])
        h2 = h2_vector(L, w0, y, nt)
        if cfg.stackelberg_mode == "empirical_fisher":
            n = cfg.fisher_samples
            G = jax.vmap(lambda o, k: jax.grad(lambda yy: term(w0, yy[:nt], yy[nt:], o, k))(y))(obs[:n], keys[:n])
            z = fisher_solve(G, h2, jnp.float32(cfg.fisher_damping), nt)
        else:
            H = chunked_actor_hessian(J, w0, y, nt)
            z = jnp.linalg.solve(H, h2)
        corr = h1_transpose(J, w0, y, z, nt)
        return loss, unravel_w(g_w - corr), jnp.linalg.norm(corr)

    def _update(self, s: TrainState, key):
        cfg, nets, obj = self.cfg, self.nets, self.objectives
        k_b, k_c, k_j, k_a, k_e = jax.random.split(key, 5)
        batch = buffer_sample(s.buffer, k_b, cfg.batch_size)
        eta_u, eta_d = jnp.exp(s.log_eta_u), jnp.exp(s.log_eta_d)
        temps = Temperatures(eta_u, eta_d, self.h0_u, self.h0_d)

        loss, g_c, corr_norm = self._critic_direction(s, batch, temps, k_c, k_j)
        upd, opt_c = self.tx_c.update(g_c, s.opt_c, s.q1)
        q1 = optax.apply_updates(s.q1, upd)
        cp = {"q1": q1, "q2": s.q2}

        def J(t, p, k):
            return jnp.mean(obj.actor_terms(nets, cp, t, p, batch["obs"], k, temps))

        def actor_step(i, carry):
            theta, psi, opt_u, opt_d, _, _, _ = carry
            val, (g_t, g_p) = jax.value_and_grad(J, argnums=(0, 1))(theta, psi, jax.random.fold_in(k_a, i))
            if not cfg.freeze_controller:
                upd_t, opt_u = self.tx_u.update(jax.tree.map(jnp.negative, g_t), opt_u, theta)
                theta = optax.apply_updates(theta, upd_t)
            upd_p, opt_d = self.tx_d.update(g_p, opt_d, psi)
            psi = optax.apply_updates(psi, upd_p)
            return theta, psi, opt_u, opt_d, val, optax.tree.norm(g_t), optax.tree.norm(g_p)

        init = (s.theta, s.psi, s.opt_u, s.opt_d, jnp.zeros((), jnp.float32),
                jnp.zeros((), jnp.float32), jnp.zeros((), jnp.float32))
        theta, psi, opt_u, opt_d, val, gn_t, gn_p = jax.lax.fori_loop(0, cfg.k_actor, actor_step, init)

        k_eu, k_ed = jax.random.split(k_e)
        ent_u = entropy_estimate(nets.policy_u, theta, batch["obs"], k_eu)
        ent_d = entropy_estimate(nets.policy_d, psi, batch["obs"], k_ed)
        log_eta_u, log_eta_d = s.log_eta_u, s.log_eta_d
        if cfg.learn_temperature:
            # dual step on log eta toward a target entropy of -H0
            log_eta_u = log_eta_u - cfg.lr_temperature * (ent_u + self.h0_u)
            log_eta_d = log_eta_d - cfg.lr_temperature * (ent_d + self.h0_d)
        q2 = polyak(s.q2, q1, cfg.polyak)
        s = s._replace(theta=theta, psi=psi, q1=q1, q2=q2, opt_c=opt_c, opt_u=opt_u, opt_d=opt_d,
                       log_eta_u=log_eta_u.astype(jnp.float32), log_eta_d=log_eta_d.astype(jnp.float32))
        metrics = {"critic_loss": loss, "actor_objective": val, "grad_norm_critic": optax.tree.norm(g_c),
                   "grad_norm_correction": corr_norm, "grad_norm_theta": gn_t, "grad_norm_psi": gn_p,
                   "entropy_u": ent_u, "entropy_d": ent_d, "eta_u": jnp.exp(log_eta_u), "eta_d": jnp.exp(log_eta_d)}
        return s, {k: jnp.asarray(v, jnp.float32) for k, v in metrics.items()}

    def _skip(self, s: TrainState, key):
        return s, {k: jnp.full((), jnp.nan, jnp.float32) for k in METRIC_KEYS}

    def _step(self, s: TrainState, _):
        key, k_env, k_upd = jax.random.split(s.key, 3)
        s = s._replace(key=key)
        s, info = self._collect(s, k_env)
        s, metrics = jax.lax.cond(s.step >= self.cfg.warmup, self._update, self._skip, s, k_upd)
        s = s._replace(step=s.step + 1)
        return s, {**metrics, **info}

    def _run_chunk(self, s: TrainState, n: int):
        return jax.lax.scan(self._step, s, None, length=n)

    def run_chunk(self, s: TrainState, n: int):
        return self._chunk(s, n)


def summarize_chunk(step: int, traces: dict, elapsed: float, n: int) -> dict:
    """Reduce one chunk of per-step traces to a metrics record."""
    rec: dict = {"step": int(step)}
    for k in METRIC_KEYS:
        v = np.asarray(traces[k], dtype=np.float64)
        v = v[~np.isnan(v)]
        rec[k] = float(v.mean()) if v.size else None
    rets = np.asarray(traces["episode_return"], dtype=np.float64)
    rets = rets[~np.isnan(rets)]
    rec["episodes"] = int(rets.size)
    rec["episode_return"] = float(rets.mean()) if rets.size else None
    rec["failures"] = int(np.asarray(traces["failed"]).sum())
    rec["wall_time_s"] = float(elapsed)
    rec["wall_time_per_step"] = float(elapsed / max(n, 1))
    return rec


def strip_timing(records):
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in records]


@dataclass
class TrainResult:
    config: OffPolicyConfig
    state: TrainState
    metrics: list
    trainer: OffPolicyTrainer
    run_dir: Path | None = None

    @property
    def params(self) -> dict:
        s = self.state
        return {"theta": s.theta, "psi": s.psi, "omega1": s.q1, "omega2": s.q2}


def architecture(trainer: OffPolicyTrainer) -> dict:
    n = trainer.nets
    return {"env": trainer.cfg.env, "objective": trainer.cfg.objective, "policy_u": n.policy_u.describe(),
            "policy_d": n.policy_d.describe(), "critic": n.critic.describe()}


def train_offpolicy(cfg: OffPolicyConfig, out_dir=None, init_params: dict | None = None,
                    on_chunk: Callable | None = None, log: Callable | None = None) -> TrainResult:
    """Run the configured number of steps, writing metrics and a checkpoint when ``out_dir`` is given.

    A non-finite critic loss or actor objective aborts the run after dumping
    the offending chunk's record to ``diagnostic.json``.
    """
    trainer = OffPolicyTrainer(cfg)
    state = trainer.init_state(init_params)
    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        mfile = open(run_dir / "metrics.jsonl", "w")
    records = []
    done = 0
    try:
        while done < cfg.total_steps:
            n = min(cfg.chunk_steps, cfg.total_steps - done)
            t0 = time.perf_counter()
            state, traces = trainer.run_chunk(state, n)
            traces = jax.device_get(traces)
            elapsed = time.perf_counter() - t0
            done += n
            rec = summarize_chunk(done, traces, elapsed, n)
            bad = [k for k in ("critic_loss", "actor_objective") if rec[k] is not None and not math.isfinite(rec[k])]
            if bad:
                if run_dir is not None:
                    (run_dir / "diagnostic.json").write_text(json.dumps(rec, indent=2, default=str))
                raise FloatingPointError(f"non-finite {', '.join(bad)} by step {done}")
            if on_chunk is not None:
                on_chunk(trainer, state, rec)
            records.append(rec)
            if run_dir is not None:
                mfile.write(json.dumps(rec, sort_keys=True) + "\n")
                mfile.flush()
            if log is not None:
                log(rec)
    finally:
        if run_dir is not None:
            mfile.close()
    result = TrainResult(cfg, state, records, trainer, run_dir)
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoint.bin", result.params, architecture(trainer),
                        rng_state=state.key, extra={"step": int(state.step), "config": cfg.to_dict()})
    return result


def benchmark_update(cfg: OffPolicyConfig, repeats: int = 50, fill_steps: int | None = None) -> dict:
    """Median wall time (seconds) of one isolated jitted learning step for this configuration.

    The buffer is first filled by ``fill_steps`` collection-only steps so
    the timed call works on realistic data.
    """
    trainer = OffPolicyTrainer(replace(cfg, warmup=max(cfg.warmup, fill_steps or cfg.batch_size)))
    state = trainer.init_state()
    state, _ = trainer.run_chunk(state, trainer.cfg.warmup)
    key = jax.random.PRNGKey(cfg.seed + 1)
    out = trainer.update(state, key)
    jax.block_until_ready(out)
    times = []
    for i in range(repeats):
        k = jax.random.fold_in(key, i)
        t0 = time.perf_counter()
        jax.block_until_ready(trainer.update(state, k))
        times.append(time.perf_counter() - t0)
    return {"variant": cfg.variant, "mode": cfg.stackelberg_mode, "median_s": float(np.median(times)),
            "repeats": repeats}
