"""Round-robin evaluation of controllers against disturbances.

Set ``s`` pits each controller class's ``s``-th checkpoint against each
disturbance class's ``s``-th checkpoint over ``games_per_set`` episodes.
Every pair sees the same initial states for the same (set, game) index,
and both players act with their mean actions.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from magics_lab.envs import Pendulum, TwoPlayerEnv, adjudicate, make_env
from magics_lab.policies import CheckpointError, GaussianPolicy, load_checkpoint

ZERO = "zero"


@dataclass(frozen=True)
class Player:
    """A policy ready to act: either a network with parameters or the zero action."""

    label: str
    policy: GaussianPolicy | None = None
    params: object = None

    def act(self, obs):
        if self.policy is None:
            return jnp.zeros(obs.shape[:-1] + (1,), jnp.float32)
        return self.policy.mean_action(self.params, obs)


def load_player(path, role: str, env: TwoPlayerEnv, label: str | None = None) -> Player:
    """Controller (``theta``) or disturbance (``psi``) from a checkpoint; ``"zero"`` gives the null player."""
    if str(path) == ZERO:
        return Player(label or ZERO)
    header, segments = load_checkpoint(path)
    seg, arch_key = ("theta", "policy_u") if role == "controller" else ("psi", "policy_d")
    if seg not in segments:
        raise CheckpointError(f"{path}: no {seg} segment for a {role}")
    arch = dict(header["architecture"][arch_key])
    arch.pop("kind", None)
    arch["hidden"] = tuple(arch["hidden"])
    policy = GaussianPolicy(**arch)
    if policy.obs_dim != env.obs_dim:
        raise CheckpointError(f"{path}: policy expects {policy.obs_dim}-d observations, env gives {env.obs_dim}")
    expected = policy.init(jax.random.PRNGKey(0))
    got = segments[seg]
    if [w.shape for layer in expected for w in layer] != [w.shape for layer in got for w in layer]:
        raise CheckpointError(f"{path}: parameter shapes do not match the declared architecture")
    return Player(label or str(path), policy, got)


@dataclass(frozen=True)
class TournamentSpec:
    env: str
    controllers: dict
    disturbances: dict
    sets: int = 5
    games_per_set: int = 100
    seed_base: int = 1000
    episode_steps: int = 0

    def __post_init__(self):
        for group in (self.controllers, self.disturbances):
            for label, paths in group.items():
                if paths != ZERO and len(paths) != self.sets:
                    raise ValueError(f"class {label!r} needs {self.sets} checkpoints (one per set), got {len(paths)}")


@dataclass
class ResultMatrix:
    controllers: list
    disturbances: list
    per_set: dict = field(default_factory=dict)
    scored_by: str = "win_rate"

    def mean(self, c: str, d: str) -> float:
        return float(np.mean(self.per_set[(c, d)]))

    def std(self, c: str, d: str) -> float:
        return float(np.std(self.per_set[(c, d)]))

    def write_csv(self, path) -> None:
        """Rows are controllers, columns disturbances, entries the mean over sets."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["controller"] + list(self.disturbances))
            for c in self.controllers:
                w.writerow([c] + [f"{self.mean(c, d):.6f}" for d in self.disturbances])

    def write_sets_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["controller", "disturbance", "set", self.scored_by])
            for c in self.controllers:
                for d in self.disturbances:
                    for s, v in enumerate(self.per_set[(c, d)]):
                        w.writerow([c, d, s, f"{v:.6f}"])


def initial_states(env: TwoPlayerEnv, seed_base: int, sets: int, games: int):
    keys = jax.random.split(jax.random.PRNGKey(seed_base), sets * games)
    return jax.vmap(env.sample_initial)(keys).reshape(sets, games, env.state_dim)


def play(env: TwoPlayerEnv, controller: Player, disturbance: Player, x0, steps: int):
    """Batch of deterministic episodes; returns the state trace ``(n, steps, state_dim)`` and signals."""
    def episode(x):
        def body(x, _):
            obs = env.observe(x).astype(jnp.float32)
            u = controller.act(obs)
            d = disturbance.act(obs)
            xn = env.transition(x, u, d)
            return xn, (xn, env.signal(x, u, d, xn))
        _, (xs, sig) = jax.lax.scan(body, x, None, length=steps)
        return xs, sig
    return jax.jit(jax.vmap(episode))(x0)


def run_tournament(spec: TournamentSpec, out_dir=None, threads: int = 1) -> ResultMatrix:
    env = make_env(spec.env)
    steps = spec.episode_steps or (env.episode_steps if isinstance(env, Pendulum) else env.train_horizon)
    x0 = initial_states(env, spec.seed_base, spec.sets, spec.games_per_set)
    ctrl = {c: [load_player(p, "controller", env, c) for p in paths] if paths != ZERO else [Player(c)] * spec.sets
            for c, paths in spec.controllers.items()}
    dist = {d: [load_player(p, "disturbance", env, d) for p in paths] if paths != ZERO else [Player(d)] * spec.sets
            for d, paths in spec.disturbances.items()}
    pendulum = isinstance(env, Pendulum)
    jobs = [(c, d, s) for c in ctrl for d in dist for s in range(spec.sets)]

    def score(job):
        c, d, s = job
        xs, sig = play(env, ctrl[c][s], dist[d][s], x0[s], steps)
        xs, sig = np.asarray(xs), np.asarray(sig)
        episodes = []
        for g in range(xs.shape[0]):
            rec = {"controller": c, "disturbance": d, "set": s, "game": g, "x0": np.asarray(x0[s, g]).tolist()}
            if pendulum:
                adj = adjudicate(xs[g, :, 0], env)
                rec.update(win=bool(adj.win), failure_mode=adj.failure_mode)
            else:
                rec.update(episode_reward=float(sig[g].sum()))
            episodes.append(rec)
        key = "win" if pendulum else "episode_reward"
        return float(np.mean([e[key] for e in episodes])), episodes

    # results are reduced in job order, whatever order the workers finish in
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        outcomes = list(pool.map(score, jobs))
    result = ResultMatrix(list(ctrl), list(dist), scored_by="win_rate" if pendulum else "episode_reward")
    for (c, d, s), (val, _) in zip(jobs, outcomes):
        result.per_set.setdefault((c, d), []).append(val)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.write_csv(out / "matrix.csv")
        result.write_sets_csv(out / "sets.csv")
        with open(out / "episodes.jsonl", "w") as fh:
            for _, eps in outcomes:
                for e in eps:
                    fh.write(json.dumps(e, sort_keys=True) + "\n")
    return result


def win_rate(env: Pendulum, controller: Player, disturbance: Player, n: int = 100, seed: int = 7) -> float:
    x0 = initial_states(env, seed, 1, n)[0]
    xs, _ = play(env, controller, disturbance, x0, env.episode_steps)
    return float(np.mean([adjudicate(a, env).win for a in np.asarray(xs)[:, :, 0]]))


def players_from_params(trainer, params) -> tuple[Player, Player]:
    n = trainer.nets
    return Player("controller", n.policy_u, params["theta"]), Player("disturbance", n.policy_d, params["psi"])


def fixed_point_labels(labels: Sequence[str]) -> list:
    return sorted(labels)
