"""Discounted reach-avoid safety: Isaacs objectives, a tabular oracle and a value-based filter.

Two backups are available on the grid:

``avoid_only``
    ``V = (1 - gamma) g + gamma min{g, max_u min_d V(f(x, u, d))}``, the
    recursion the learned critic regresses onto.
``reach_avoid``
    ``V = min{(1 - gamma) g, gamma max{ell, max_u min_d V(f(x, u, d))}}``,
    which also rewards reaching the target set.

The reach-avoid set is ``{x : V(x) >= 0}`` in both cases.
"""

from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import scipy.sparse

from magics_lab.algos.offpolicy import OffPolicyConfig, TrainResult, train_offpolicy
from magics_lab.envs import DoubleIntegrator, MarginFunctions, TwoPlayerEnv, make_env

BACKUP_VARIANTS = ("avoid_only", "reach_avoid")


# -- learned objectives -------------------------------------------------------------

def isaacs_critic_loss(nets, q1, q2, theta, psi, batch, key, gamma):
    """Mean of (Q1(x,u,d) - (1-gamma) g' - gamma min{g', Q2(x',u',d')})^2.

    Transitions that entered the failure set are absorbing: their target is g'.
    """
    k_u, k_d = jax.random.split(key)
    u_next, _, _ = nets.policy_u.sample(theta, batch["next_obs"], k_u)
    d_next, _, _ = nets.policy_d.sample(psi, batch["next_obs"], k_d)
    g = batch["signal"]
    q_next = nets.critic.q(q2, batch["next_obs"], u_next, d_next)
    target = (1.0 - gamma) * g + gamma * jnp.minimum(g, q_next)
    if "failed" in batch:
        target = jnp.where(batch["failed"], g, target)
    pred = nets.critic.q(q1, batch["obs"], batch["u"], batch["d"])
    return jnp.mean((pred - target) ** 2)


def isaacs_actor_terms(nets, critic_params, theta, psi, obs, key, temps):
    """Per-state Q1(x, u~, d~) - eta_u log pi_u(u~|x) + eta_d log pi_d(d~|x)."""
    k_u, k_d = jax.random.split(key)
    u, lp_u, _ = nets.policy_u.sample(theta, obs, k_u)
    d, lp_d, _ = nets.policy_d.sample(psi, obs, k_d)
    q = nets.critic.q(critic_params["q1"], obs, u, d)
    return q - temps.eta_u * lp_u + temps.eta_d * lp_d


def isaacs_actor_objective(nets, critic_params, theta, psi, obs, key, temps):
    """``(J, dJ/dtheta, dJ/dpsi)``: the controller ascends J, the disturbance descends it."""
    def J(t, p):
        return jnp.mean(isaacs_actor_terms(nets, critic_params, t, p, obs, key, temps))
    value, (g_t, g_p) = jax.value_and_grad(J, argnums=(0, 1))(theta, psi)
    return value, g_t, g_p


class IsaacsObjectives:
    name = "isaacs"

    def critic_loss(self, nets, q1, q2, theta, psi, batch, key, gamma):
        return isaacs_critic_loss(nets, q1, q2, theta, psi, batch, key, gamma)

    def actor_terms(self, nets, critic_params, theta, psi, obs, key, temps):
        return isaacs_actor_terms(nets, critic_params, theta, psi, obs, key, temps)


# -- tabular oracle -------------------------------------------------------------------

@dataclass(frozen=True)
class SafetySpec:
    margins: MarginFunctions
    gamma: float = 0.99
    variant: str = "avoid_only"

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.variant not in BACKUP_VARIANTS:
            raise ValueError(f"variant must be one of {BACKUP_VARIANTS}")


@dataclass(frozen=True)
class GridAxis:
    name: str
    low: float
    high: float
    n: int

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.n)

    @property
    def step(self) -> float:
        return (self.high - self.low) / (self.n - 1)


@dataclass
class ValueGrid:
    """Values on a regular 2-D grid with the greedy action indices of the last sweep."""

    axes: tuple
    values: np.ndarray
    u_levels: np.ndarray
    d_levels: np.ndarray
    best_u: np.ndarray | None = None
    worst_d: np.ndarray | None = None
    gamma: float | None = None
    variant: str | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def shape(self):
        return tuple(a.n for a in self.axes)

    def states(self) -> np.ndarray:
        """All cell centers, row-major, shape ``(N, 2)``."""
        mesh = np.meshgrid(*[a.points for a in self.axes], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def lipschitz_margin(self) -> float:
        """Largest finite-difference slope times one cell diagonal."""
        v = self.values
        slopes = [np.abs(np.diff(v, axis=i)).max() / a.step for i, a in enumerate(self.axes)]
        return float(np.hypot(*[s * a.step for s, a in zip(slopes, self.axes)]))


def default_axes(env: DoubleIntegrator, resolution=(161, 161)) -> tuple:
    return (GridAxis("pos", env.box_low[0], env.box_high[0], resolution[0]),
            GridAxis("vel", env.box_low[1], env.box_high[1], resolution[1]))


def _bilinear(axes, x):
    """Corner indices and weights for bilinear interpolation; states outside are clamped."""
    idx, frac, outside = [], [], np.zeros(x.shape[0], dtype=bool)
    for i, a in enumerate(axes):
        s = (x[:, i] - a.low) / a.step
        outside |= (s < -1e-9) | (s > a.n - 1 + 1e-9)
        s = np.clip(s, 0.0, a.n - 1)
        k = np.minimum(np.floor(s).astype(np.int64), a.n - 2)
        idx.append(k)
        frac.append(s - k)
    (i0, j0), (fx, fy) = idx, frac
    n1 = axes[1].n
    cols = np.stack([i0 * n1 + j0, i0 * n1 + j0 + 1, (i0 + 1) * n1 + j0, (i0 + 1) * n1 + j0 + 1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), (1 - fx) * fy, fx * (1 - fy), fx * fy], axis=-1)
    return cols, w, outside


class GridDynamics:
    """Sparse interpolation operator mapping grid values to V(f(x, u, d)) for every cell and action pair."""

    def __init__(self, env: TwoPlayerEnv, axes, u_levels: int | Sequence = 9, d_levels: int | Sequence = 5):
        self.env = env
        self.axes = tuple(axes)
        self.u_levels = np.linspace(-env.u_max, env.u_max, u_levels) if np.isscalar(u_levels) else np.asarray(u_levels)
        self.d_levels = np.linspace(-env.d_max, env.d_max, d_levels) if np.isscalar(d_levels) else np.asarray(d_levels)
        mesh = np.meshgrid(*[a.points for a in self.axes], indexing="ij")
        self.states = np.stack([m.ravel() for m in mesh], axis=-1)
        nu, nd = len(self.u_levels), len(self.d_levels)
        N = self.states.shape[0]
        U, D = np.meshgrid(self.u_levels, self.d_levels, indexing="ij")
        f = jax.jit(jax.vmap(jax.vmap(env.transition, (None, 0, 0)), (0, None, None)))
        nxt = np.asarray(f(jnp.asarray(self.states), jnp.asarray(U.reshape(-1, 1)), jnp.asarray(D.reshape(-1, 1))))
        nxt = nxt.reshape(N * nu * nd, 2)
        cols, w, outside = _bilinear(self.axes, nxt)
        rows = np.repeat(np.arange(N * nu * nd), 4)
        self.P = scipy.sparse.csr_matrix((w.ravel(), (rows, cols.ravel())), shape=(N * nu * nd, N))
        self.outside = outside.reshape(N, nu, nd)
        self.g = np.asarray(env.g(self.states), dtype=np.float64)
        self.ell = np.asarray(env.ell(self.states), dtype=np.float64)
        self.shape = tuple(a.n for a in self.axes)

    def q_table(self, values: np.ndarray) -> np.ndarray:
        """``V(f(x, u_a, d_b))`` as an ``(N, n_u, n_d)`` array."""
        N = self.states.shape[0]
        return (self.P @ values.ravel()).reshape(N, len(self.u_levels), len(self.d_levels))


def isaacs_backup(grid: ValueGrid, spec: SafetySpec, dynamics: GridDynamics) -> ValueGrid:
    """One synchronous sweep of the selected discounted Isaacs backup."""
    q = dynamics.q_table(grid.values)
    inner = q.min(axis=2)
    best_u = inner.argmax(axis=1)
    game = inner.max(axis=1)
    worst_d = q[np.arange(q.shape[0]), best_u].argmin(axis=1)
    gam = spec.gamma
    g = np.asarray(spec.margins.g(dynamics.states), dtype=np.float64)
    if spec.variant == "avoid_only":
        new = (1.0 - gam) * g + gam * np.minimum(g, game)
    else:
        ell = np.asarray(spec.margins.ell(dynamics.states), dtype=np.float64)
        new = np.minimum((1.0 - gam) * g, gam * np.maximum(ell, game))
    flagged = int(dynamics.outside[np.arange(q.shape[0]), best_u].any(axis=1).sum())
    return ValueGrid(grid.axes, new.reshape(dynamics.shape), dynamics.u_levels, dynamics.d_levels,
                     best_u.reshape(dynamics.shape), worst_d.reshape(dynamics.shape), spec.gamma, spec.variant,
                     {"out_of_grid_cells": flagged})


def solve_isaacs(env: DoubleIntegrator | None = None, gamma: float = 0.99, variant: str = "avoid_only",
                 resolution=(161, 161), u_levels: int = 9, d_levels: int = 5, tol: float = 1e-6,
                 max_sweeps: int = 100_000, dynamics: GridDynamics | None = None,
                 log: Callable | None = None) -> ValueGrid:
    """Iterate the backup from ``V = g`` until the sup-norm change drops below ``tol``.

    ``diagnostics["residuals"]`` holds the sup-norm change of every sweep.
    """
    env = env or DoubleIntegrator()
    dyn = dynamics or GridDynamics(env, default_axes(env, resolution), u_levels, d_levels)
    spec = SafetySpec(env.margins, gamma, variant)
    grid = ValueGrid(dyn.axes, dyn.g.reshape(dyn.shape).copy(), dyn.u_levels, dyn.d_levels,
                     gamma=gamma, variant=variant)
    residuals = []
    t0 = time.perf_counter()
    for sweep in range(1, max_sweeps + 1):
        new = isaacs_backup(grid, spec, dyn)
        res = float(np.max(np.abs(new.values - grid.values)))
        residuals.append(res)
        grid = new
        if log is not None and sweep % 500 == 0:
            log({"sweep": sweep, "residual": res})
        if res < tol:
            break
    grid.diagnostics.update({"sweeps": len(residuals), "residuals": residuals, "converged": residuals[-1] < tol,
                             "tol": tol, "seconds": time.perf_counter() - t0})
    return grid


# -- interpolation and greedy play on the grid ----------------------------------------------

def interpolate(grid: ValueGrid, x):
    """Bilinear value at states ``x`` of shape ``(..., 2)``; jittable, clamps outside the box."""
    x = jnp.asarray(x)
    vals = jnp.asarray(grid.values)
    i_list, f_list = [], []
    for i, a in enumerate(grid.axes):
        s = jnp.clip((x[..., i] - a.low) / a.step, 0.0, a.n - 1)
        k = jnp.minimum(jnp.floor(s).astype(jnp.int32), a.n - 2)
        i_list.append(k)
        f_list.append(s - k)
    (i0, j0), (fx, fy) = i_list, f_list
    return ((1 - fx) * (1 - fy) * vals[i0, j0] + (1 - fx) * fy * vals[i0, j0 + 1]
            + fx * (1 - fy) * vals[i0 + 1, j0] + fx * fy * vals[i0 + 1, j0 + 1])


def greedy_control(grid: ValueGrid, env: TwoPlayerEnv, x):
    """argmax_u min_d V(f(x, u, d)) over the grid's action levels, evaluated at a continuous state."""
    U = jnp.asarray(grid.u_levels)
    D = jnp.asarray(grid.d_levels)
    nxt = jax.vmap(lambda u: jax.vmap(lambda d: env.transition(x, u[None], d[None]))(D))(U)
    return U[jnp.argmax(interpolate(grid, nxt).min(axis=1))]


def worst_disturbance(grid: ValueGrid, env: TwoPlayerEnv, x, u):
    """argmin_d V(f(x, u, d)) over the disturbance levels."""
    D = jnp.asarray(grid.d_levels)
    nxt = jax.vmap(lambda d: env.transition(x, jnp.atleast_1d(u), d[None]))(D)
    return D[jnp.argmin(interpolate(grid, nxt))]


# -- reach-avoid sets ----------------------------------------------------------------------

@dataclass(frozen=True)
class LearnedValue:
    """V(x) = Q1(x, mean controller action, mean disturbance action)."""

    nets: object
    theta: object
    psi: object
    q1: object

    @classmethod
    def from_result(cls, result: TrainResult) -> "LearnedValue":
        s = result.state
        return cls(result.trainer.nets, s.theta, s.psi, s.q1)

    def __call__(self, obs):
        obs = jnp.asarray(obs, jnp.float32)
        u = self.nets.policy_u.mean_action(self.theta, obs)
        d = self.nets.policy_d.mean_action(self.psi, obs)
        return self.nets.critic.q(self.q1, obs, u, d)


def reach_avoid_set(value, states=None) -> np.ndarray:
    """Indicator ``V(x) >= 0``: on the grid cells for a :class:`ValueGrid` without ``states``,
    otherwise at the given states (interpolated or through the learned critic)."""
    if isinstance(value, ValueGrid):
        v = value.values if states is None else np.asarray(interpolate(value, states))
    else:
        if states is None:
            raise ValueError("a learned value needs query states")
        v = np.asarray(value(states))
    return np.asarray(v) >= 0


def set_agreement(oracle: ValueGrid, learned) -> float:
    """Fraction of oracle grid cells where the learned and oracle indicators coincide."""
    ref = reach_avoid_set(oracle).ravel()
    got = reach_avoid_set(learned, oracle.states())
    return float(np.mean(ref == got))


# -- safety filter ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterDecision:
    chosen_action: np.ndarray
    intervened: bool
    monitored_value: float
    threshold: float


class OracleMonitor:
    """Tabular value with its greedy controller as the safety policy."""

    def __init__(self, grid: ValueGrid, env: TwoPlayerEnv):
        self.grid, self.env = grid, env

    def value(self, x):
        return interpolate(self.grid, x)

    def safety_action(self, x):
        return jnp.atleast_1d(greedy_control(self.grid, self.env, x))


class LearnedMonitor:
    """Learned critic as the monitor and the controller's mean action as the safety policy."""

    def __init__(self, learned: LearnedValue, env: TwoPlayerEnv):
        self.learned, self.env = learned, env

    def value(self, x):
        return self.learned(self.env.observe(x))

    def safety_action(self, x):
        return self.learned.nets.policy_u.mean_action(self.learned.theta, jnp.asarray(self.env.observe(x), jnp.float32))


PREDICTIONS = ("nominal", "worst_case")


def predicted_value(env: TwoPlayerEnv, monitor, x, action, prediction: str = "nominal", d_levels=None):
    """Monitored value of the successor of ``action``.

    ``nominal`` predicts with zero disturbance; ``worst_case`` takes the
    minimum over ``d_levels`` (the monitor grid's disturbance levels by
    default).
    """
    action = jnp.atleast_1d(action)
    if prediction == "nominal":
        return monitor.value(env.transition(x, action, jnp.zeros((env.d_dim,))))
    if prediction != "worst_case":
        raise ValueError(f"prediction must be one of {PREDICTIONS}")
    D = jnp.asarray(monitor.grid.d_levels if d_levels is None else d_levels)
    return jax.vmap(lambda d: monitor.value(env.transition(x, action, d[None])))(D).min()


def filter_action(env: TwoPlayerEnv, monitor, x, task_action, threshold, prediction: str = "nominal"):
    """Jittable core of :func:`safety_filter`: ``(action, intervened, monitored_value)``."""
    task_action = jnp.atleast_1d(task_action)
    v = predicted_value(env, monitor, x, task_action, prediction)
    intervene = v < threshold
    action = jnp.where(intervene, monitor.safety_action(x).astype(task_action.dtype), task_action)
    return action, intervene, v


def safety_filter(env: TwoPlayerEnv, x, task_action, monitor, threshold: float = 0.0,
                  prediction: str = "nominal") -> FilterDecision:
    """Pass the task action unless the monitored value of its predicted successor is below ``threshold``."""
    action, intervene, v = filter_action(env, monitor, jnp.asarray(x), task_action, threshold, prediction)
    return FilterDecision(np.asarray(action), bool(intervene), float(v), float(threshold))


def filtered_rollouts(grid: ValueGrid, env: DoubleIntegrator, x0, task_policy: Callable, steps: int = 200,
                      threshold: float = 0.0, monitor=None, prediction: str = "nominal", seed: int = 0):
    """Roll out filtered play against the grid's worst-case disturbance.

    Returns per-rollout failure flags, intervention counts and the minimum g
    reached.  ``task_policy(x, key)`` supplies the (possibly unsafe) task action.
    """
    monitor = monitor or OracleMonitor(grid, env)

    def one(x, key):
        def body(carry, k):
            x, failed = carry
            task = jnp.atleast_1d(task_policy(x, k))
            u, intervened, _ = filter_action(env, monitor, x, task, threshold, prediction)
            d = worst_disturbance(grid, env, x, u)
            xn = env.transition(x, u, jnp.atleast_1d(d))
            return (xn, failed | env.failed(xn)), (intervened, env.g(xn))
        (_, failed), (iv, g) = jax.lax.scan(body, (x, jnp.asarray(False)), jax.random.split(key, steps))
        return failed, iv.sum(), g.min()

    keys = jax.random.split(jax.random.PRNGKey(seed), x0.shape[0])
    failed, iv, gmin = jax.jit(jax.vmap(one))(jnp.asarray(x0), keys)
    return np.asarray(failed), np.asarray(iv), np.asarray(gmin)


def greedy_rollouts(grid: ValueGrid, env: DoubleIntegrator, x0, steps: int = 200):
    """Unfiltered (argmax u, argmin d) play from each start; returns failure flags."""
    def one(x):
        def body(carry, _):
            x, failed = carry
            u = greedy_control(grid, env, x)
            d = worst_disturbance(grid, env, x, u)
            xn = env.transition(x, jnp.atleast_1d(u), jnp.atleast_1d(d))
            return (xn, failed | env.failed(xn)), None
        (_, failed), _ = jax.lax.scan(body, (x, jnp.asarray(False)), None, length=steps)
        return failed
    return np.asarray(jax.jit(jax.vmap(one))(jnp.asarray(x0)))


def interior_starts(grid: ValueGrid, n: int, margin: float | None = None, seed: int = 0) -> np.ndarray:
    """``n`` cell centers drawn (with replacement if needed) from ``{V >= margin}``."""
    margin = grid.lipschitz_margin if margin is None else margin
    states = grid.states()
    inside = states[grid.values.ravel() >= margin]
    if inside.size == 0:
        raise ValueError("no grid cell clears the requested margin")
    rng = np.random.default_rng(seed)
    return inside[rng.choice(inside.shape[0], size=n, replace=inside.shape[0] < n)]


# -- export ----------------------------------------------------------------------------------

GRID_MAGIC = b"MAGICSVG"
GRID_VERSION = 1


def _grid_header(grid: ValueGrid) -> dict:
    return {"format": "magics-value-grid", "version": GRID_VERSION,
            "axes": [{"name": a.name, "low": a.low, "high": a.high, "n": a.n} for a in grid.axes],
            "order": "row-major", "dtype": "<f8", "gamma": grid.gamma, "variant": grid.variant,
            "u_levels": [float(u) for u in grid.u_levels], "d_levels": [float(d) for d in grid.d_levels]}


def save_value_grid(path, grid: ValueGrid) -> Path:
    """Binary grid (magic, uint32 header length, JSON axis header, float64 values) plus a JSON sidecar."""
    path = Path(path)
    header = _grid_header(grid)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())
    diag = {k: v for k, v in grid.diagnostics.items() if k != "residuals"}
    side = {**header, "diagnostics": diag, "value_min": float(grid.values.min()),
            "value_max": float(grid.values.max()), "reach_avoid_fraction": float(np.mean(grid.values >= 0))}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def load_value_grid(path) -> ValueGrid:
    data = Path(path).read_bytes()
    if data[:8] != GRID_MAGIC:
        raise ValueError(f"{path}: not a value-grid file")
    (n,) = struct.unpack("<I", data[8:12])
    h = json.loads(data[12:12 + n].decode())
    axes = tuple(GridAxis(a["name"], a["low"], a["high"], a["n"]) for a in h["axes"])
    shape = tuple(a.n for a in axes)
    values = np.frombuffer(data, dtype="<f8", offset=12 + n).reshape(shape).copy()
    return ValueGrid(axes, values, np.asarray(h["u_levels"]), np.asarray(h["d_levels"]),
                     gamma=h["gamma"], variant=h["variant"])


def write_set_snapshot(path, states: np.ndarray, values: np.ndarray) -> None:
    """CSV point cloud ``pos,vel,value,inside`` for plotting a reach-avoid set."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pos", "vel", "value", "inside"])
        for (p, v), val in zip(np.asarray(states), np.asarray(values)):
            w.writerow([f"{p:.6f}", f"{v:.6f}", f"{val:.6f}", int(val >= 0)])


# -- training ----------------------------------------------------------------------------------

def safety_config(**overrides) -> OffPolicyConfig:
    """Double-integrator Isaacs configuration with desk-scale defaults."""
    base = dict(env="double-integrator", objective="isaacs", variant="magics", total_steps=200_000,
                buffer_size=200_000, gamma=0.99)
    base.update(overrides)
    return OffPolicyConfig(**base)


@dataclass
class SafetyRun:
    result: TrainResult
    agreement: list
    oracle: ValueGrid | None

    @property
    def final_agreement(self) -> float | None:
        return self.agreement[-1][1] if self.agreement else None


def magics_safety_train(cfg: OffPolicyConfig, oracle: ValueGrid | None = None, out_dir=None,
                        snapshot_every: int = 20_000, snapshot_resolution=(41, 41),
                        log: Callable | None = None) -> SafetyRun:
    """Train with the Isaacs objectives, tracking set agreement against ``oracle`` and writing snapshots."""
    if cfg.objective != "isaacs":
        cfg = replace(cfg, objective="isaacs")
    env = make_env(cfg.env, **cfg.env_params)
    snap_axes = default_axes(env, snapshot_resolution)
    snap_states = np.stack([m.ravel() for m in np.meshgrid(*[a.points for a in snap_axes], indexing="ij")], -1)
    run_dir = Path(out_dir) if out_dir is not None else None
    agreement = []

    def on_chunk(trainer, state, rec):
        step = rec["step"]
        if step % snapshot_every and step != cfg.total_steps:
            return
        learned = LearnedValue(trainer.nets, state.theta, state.psi, state.q1)
        if oracle is not None:
            a = set_agreement(oracle, learned)
            agreement.append((step, a))
            rec["set_agreement"] = a
        if run_dir is not None:
            snap_dir = run_dir / "snapshots"
            snap_dir.mkdir(parents=True, exist_ok=True)
            write_set_snapshot(snap_dir / f"set_{step:08d}.csv", snap_states, np.asarray(learned(snap_states)))
        if log is not None:
            log(rec)

    result = train_offpolicy(cfg, out_dir=run_dir, on_chunk=on_chunk)
    if run_dir is not None and agreement:
        (run_dir / "agreement.json").write_text(json.dumps([{"step": s, "agreement": a} for s, a in agreement]))
    return SafetyRun(result, agreement, oracle)
