"""Two-player environments: control ``u`` against disturbance ``d``.

Dynamics are written with ``jax.numpy`` so the same functions serve the
stepwise numpy-facing API and the jitted training loops.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import jax
import jax.numpy as jnp
import numpy as np


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return jnp.pi - jnp.mod(jnp.pi - a, 2 * jnp.pi)


@dataclass(frozen=True)
class EnvState:
    x: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MarginFunctions:
    """Target set {ell >= 0} and failure set {g < 0}."""

    ell: Callable
    g: Callable


class TwoPlayerEnv:
    """Shared plumbing; subclasses provide ``transition`` and ``signal``."""

    name = "env"
    state_dim = 0
    obs_dim = 0
    u_dim = 1
    d_dim = 1
    u_max = 1.0
    d_max = 1.0

    def clip_u(self, u):
        return jnp.clip(u, -self.u_max, self.u_max)

    def clip_d(self, d):
        return jnp.clip(d, -self.d_max, self.d_max)

    def observe(self, x):
        return x

    def reset(self, seed) -> EnvState:
        return EnvState(np.asarray(self.sample_initial(jax.random.PRNGKey(seed)), dtype=np.float64), 0)

    def step(self, state: EnvState, u, d) -> StepResult:
        x = jnp.asarray(state.x, dtype=jnp.float64)
        u = jnp.atleast_1d(jnp.asarray(u, dtype=jnp.float64))
        d = jnp.atleast_1d(jnp.asarray(d, dtype=jnp.float64))
        x_next = self.transition(x, u, d)
        signal = float(self.signal(x, u, d, x_next))
        x_next = np.asarray(x_next)
        info = {"fault": False}
        if not np.all(np.isfinite(x_next)):
            info["fault"] = True
            return StepResult(EnvState(x_next, state.t + 1), signal, True, info)
        info.update(self.step_info(x_next))
        done = bool(self.failed(x_next))
        return StepResult(EnvState(x_next, state.t + 1), signal, done, info)

    def step_info(self, x_next) -> dict:
        return {}

    def failed(self, x):
        return jnp.asarray(False)

    def action_bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return (-self.u_max, self.u_max), (-self.d_max, self.d_max)


@dataclass(frozen=True)
class Pendulum(TwoPlayerEnv):
    """Torque-limited swing-up pendulum with an additive disturbance torque.

    State is (angle, angular velocity), angle 0 is upright.  Constants follow
    the classic Gym pendulum; the disturbance bound is half the control bound.
    """

    max_speed: float = 8.0
    u_max: float = 2.0
    d_max: float = 1.0
    dt: float = 0.05
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    train_horizon: int = 200
    episode_seconds: float = 20.0
    hold_seconds: float = 5.0
    upright_deg: float = 10.0

    name = "pendulum"
    state_dim = 2
    obs_dim = 3

    @property
    def reward_bound(self) -> float:
        return math.pi ** 2 + 0.1 * self.max_speed ** 2 + 0.001 * self.u_max ** 2

    @property
    def episode_steps(self) -> int:
        return int(round(self.episode_seconds / self.dt))

    def sample_initial(self, key, dtype=jnp.float64):
        k1, k2 = jax.random.split(key)
        angle = jax.random.uniform(k1, (), dtype, -jnp.pi, jnp.pi)
        vel = jax.random.uniform(k2, (), dtype, -1.0, 1.0)
        return jnp.stack([angle, vel])

    def transition(self, x, u, d):
        angle, vel = x[0], x[1]
        torque = self.clip_u(u)[0] + self.clip_d(d)[0]
        acc = 3 * self.gravity / (2 * self.length) * jnp.sin(angle) + 3.0 / (self.mass * self.length ** 2) * torque
        vel_next = jnp.clip(vel + acc * self.dt, -self.max_speed, self.max_speed)
        angle_next = wrap_angle(angle + vel_next * self.dt)
        return jnp.stack([angle_next, vel_next])

    def reward(self, x, u):
        u = self.clip_u(u)[0]
        a = wrap_angle(x[0])
        return -(a ** 2 + 0.1 * x[1] ** 2 + 0.001 * u ** 2)

    def signal(self, x, u, d, x_next):
        return self.reward(x, u)

    def observe(self, x):
        return jnp.stack([jnp.cos(x[..., 0]), jnp.sin(x[..., 0]), x[..., 1]], axis=-1)

    def energy(self, x):
        """Mechanical energy of the uniform rod, zero potential at the pivot height."""
        inertia = self.mass * self.length ** 2 / 3.0
        return 0.5 * inertia * x[1] ** 2 + self.mass * self.gravity * 0.5 * self.length * jnp.cos(x[0])

    def is_upright(self, x):
        return jnp.abs(wrap_angle(x[..., 0])) <= jnp.deg2rad(self.upright_deg)

    def step_info(self, x_next) -> dict:
        return {"upright": bool(self.is_upright(x_next))}


@dataclass(frozen=True)
class DoubleIntegrator(TwoPlayerEnv):
    """pos'' = u + d, safe while |pos| <= pos_limit, target a small box around rest at the origin."""

    dt: float = 0.1
    u_max: float = 1.0
    d_max: float = 0.4
    pos_limit: float = 2.0
    target_pos: float = 0.25
    target_vel: float = 0.5
    box_low: tuple = (-2.2, -3.0)
    box_high: tuple = (2.2, 3.0)
    train_horizon: int = 100

    name = "double-integrator"
    state_dim = 2
    obs_dim = 2

    def sample_initial(self, key, dtype=jnp.float64):
        lo = jnp.asarray(self.box_low, dtype)
        hi = jnp.asarray(self.box_high, dtype)
        return jax.random.uniform(key, (2,), dtype, lo, hi)

    def transition(self, x, u, d):
        acc = self.clip_u(u)[0] + self.clip_d(d)[0]
        vel_next = x[1] + acc * self.dt
        pos_next = x[0] + vel_next * self.dt
        return jnp.stack([pos_next, vel_next])

    def g(self, x):
        """Safety margin, negative outside the safe corridor."""
        return self.pos_limit - jnp.abs(x[..., 0])

    def ell(self, x):
        """Target margin: 0.25 - max(|pos|, (0.25/0.5) |vel|) with the default constants."""
        scale = self.target_pos / self.target_vel
        return self.target_pos - jnp.maximum(jnp.abs(x[..., 0]), scale * jnp.abs(x[..., 1]))

    @property
    def margins(self) -> MarginFunctions:
        return MarginFunctions(self.ell, self.g)

    def signal(self, x, u, d, x_next):
        return self.g(x_next)

    def failed(self, x):
        return self.g(x) < 0

    def step_info(self, x_next) -> dict:
        return {"failure": bool(self.g(x_next) < 0), "in_target": bool(self.ell(x_next) >= 0)}


ENVIRONMENTS = {"pendulum": Pendulum, "double-integrator": DoubleIntegrator}


def make_env(name: str, **overrides) -> TwoPlayerEnv:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    env = cls()
    known = {f for f in env.__dataclass_fields__}
    bad = set(overrides) - known
    if bad:
        raise ValueError(f"unknown {name} constants: {sorted(bad)}")
    return replace(env, **{k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})


@dataclass(frozen=True)
class Adjudication:
    win: bool
    failure_mode: int | None


def adjudicate(angles: Sequence[float], env: Pendulum | None = None) -> Adjudication:
    """Score one pendulum episode from its angle trace.

    Mode 1: upright was reached and then lost.  Mode 2: upright was reached
    and never lost, but too late to hold it for the required final window.
    Mode 3: upright was never reached.  Winning means the final window is
    spent entirely inside the upright band.
    """
    env = env or Pendulum()
    angles = np.asarray(angles, dtype=float)
    upright = np.abs(np.asarray(wrap_angle(angles))) <= np.deg2rad(env.upright_deg)
    hold = int(round(env.hold_seconds / env.dt))
    if upright.size >= hold and upright[-hold:].all():
        return Adjudication(True, None)
    if not upright.any():
        return Adjudication(False, 3)
    first = int(np.argmax(upright))
    if not upright[first:].all():
        return Adjudication(False, 1)
    return Adjudication(False, 2)


def rollout_trace(env: TwoPlayerEnv, state: EnvState, controls: Iterable, disturbances: Iterable):
    """Step through given action sequences, returning JSON-ready records."""
    records = []
    for u, d in zip(controls, disturbances):
        res = env.step(state, u, d)
        key = "g" if isinstance(env, DoubleIntegrator) else "r"
        records.append({"t": state.t, "x": np.asarray(state.x).tolist(),
                        "u": np.atleast_1d(u).tolist(), "d": np.atleast_1d(d).tolist(), key: res.reward})
        state = res.next_state
        if res.done:
            break
    return records


def write_trace(path, records: Iterable[dict]) -> None:
    """Episode trace as JSONL, one ``{t, x, u, d, r|g}`` object per line."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
