"""Exploiter training: a fresh disturbance learns against a frozen controller."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Callable

import jax
import numpy as np

from magics_lab.algos.offpolicy import OffPolicyConfig, train_offpolicy
from magics_lab.envs import Pendulum, make_env
from magics_lab.harness.tournament import load_player, players_from_params, win_rate
from magics_lab.policies import CheckpointError

CURVE_FIELDS = ("step", "episode_return", "controller_win_rate")


def _same_bits(a, b) -> bool:
    la, lb = jax.tree.leaves(a), jax.tree.leaves(b)
    return len(la) == len(lb) and all(np.array_equal(np.asarray(x), np.asarray(y)) for x, y in zip(la, lb))


def exploit(controller_path, cfg: OffPolicyConfig, out_dir=None, eval_every: int = 10_000,
            eval_games: int = 100, log: Callable | None = None) -> dict:
    """Train a disturbance from scratch against the controller in ``controller_path``.

    The controller's parameters are held fixed throughout; the returned report
    says whether they came back bit-for-bit unchanged.  On the pendulum the
    curve tracks the controller's win rate against the current exploiter.
    """
    env = make_env(cfg.env, **cfg.env_params)
    player = load_player(controller_path, "controller", env)
    if tuple(player.policy.hidden) != tuple(cfg.hidden):
        raise CheckpointError(f"{controller_path}: controller hidden sizes {player.policy.hidden} "
                              f"differ from the configured {cfg.hidden}")
    frozen = jax.tree.map(np.array, player.params)
    cfg = replace(cfg, freeze_controller=True)
    curve = []
    pendulum = isinstance(env, Pendulum)

    def on_chunk(trainer, state, rec):
        if rec["step"] % eval_every and rec["step"] != cfg.total_steps:
            return
        row = {"step": rec["step"], "episode_return": rec["episode_return"], "controller_win_rate": None}
        if pendulum:
            c, d = players_from_params(trainer, {"theta": state.theta, "psi": state.psi})
            row["controller_win_rate"] = win_rate(env, c, d, eval_games)
            rec["controller_win_rate"] = row["controller_win_rate"]
        curve.append(row)
        if log is not None:
            log(rec)

    result = train_offpolicy(cfg, out_dir, init_params={"theta": player.params}, on_chunk=on_chunk)
    unchanged = _same_bits(frozen, result.state.theta)
    if out_dir is not None:
        with open(Path(out_dir) / "exploit_curve.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, CURVE_FIELDS)
            w.writeheader()
            for row in curve:
                w.writerow({k: "" if v is None else v for k, v in row.items()})
    return {"controller": str(controller_path), "controller_unchanged": unchanged, "curve": curve,
            "final_win_rate": curve[-1]["controller_win_rate"] if curve else None, "result": result}
