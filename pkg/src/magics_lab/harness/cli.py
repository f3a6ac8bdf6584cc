"""Command-line entry point: ``magics-lab {train,tournament,exploit,oracle,verify}``.

Exit codes: 0 success, 1 a run or check failed, 2 bad configuration or usage.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from magics_lab.harness.config import ConfigError, RunConfig, build_dataclass, load_config

OUT_ENV = "MAGICS_LAB_OUT"


def _out_root(args, cfg: RunConfig | None = None) -> Path:
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    if args.out_dir:
        return Path(args.out_dir)
    if cfg is not None and cfg.get("run.out_dir"):
        return Path(cfg.get("run.out_dir"))
    return Path("runs")


def _env_section(cfg: RunConfig) -> tuple[str, dict]:
    env = cfg.section("env")
    name = env.pop("name")
    return name, env


def _offpolicy_config(cfg: RunConfig, args, section: str = "algo"):
    from magics_lab.algos.offpolicy import OffPolicyConfig
    name, params = _env_section(cfg)
    extra = {"env": name, "env_params": params}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.variant:
        extra["variant"] = args.variant
    if cfg.kind == "safety":
        extra.setdefault("objective", "isaacs")
    try:
        return build_dataclass(OffPolicyConfig, cfg, section, extra, convert={"hidden": tuple})
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise cfg.error(str(exc), f"{section}.variant") from None


def _run_dir(args, cfg: RunConfig, variant: str, seed: int) -> Path:
    stem = cfg.path.stem if cfg.path else "run"
    return _out_root(args, cfg) / f"{stem}-{variant}-seed{seed}"


def _print(rec: dict) -> None:
    keep = ("step", "episode_return", "critic_loss", "grad_norm_critic", "grad_norm_correction", "set_agreement")
    print(" ".join(f"{k}={rec[k]:.4g}" if isinstance(rec.get(k), float) else f"{k}={rec.get(k)}"
                   for k in keep if k in rec), flush=True)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if cfg.kind in ("offpolicy", "safety"):
        oc = _offpolicy_config(cfg, args)
        run_dir = _run_dir(args, cfg, oc.variant, oc.seed)
        if cfg.kind == "safety":
            from magics_lab.safety import magics_safety_train, solve_isaacs
            oracle = None
            if cfg.get("safety.oracle", True):
                oracle = solve_isaacs(gamma=oc.gamma, variant=cfg.get("safety.variant", "avoid_only"))
            magics_safety_train(oc, oracle, run_dir, snapshot_every=cfg.get("safety.snapshot_every", 20_000),
                                log=_print)
        else:
            from magics_lab.algos.offpolicy import train_offpolicy
            train_offpolicy(oc, run_dir, log=_print)
    elif cfg.kind == "onpolicy":
        from magics_lab.algos.onpolicy import A2CConfig, train_a2c
        name, params = _env_section(cfg)
        extra = {"env": name, "env_params": params}
        if args.seed is not None:
            extra["seed"] = args.seed
        if args.variant:
            extra["variant"] = args.variant
        ac = build_dataclass(A2CConfig, cfg, "algo", extra, convert={"hidden": tuple})
        run_dir = _run_dir(args, cfg, ac.variant, ac.seed)
        train_a2c(ac, run_dir, log=_print)
    elif cfg.kind == "game":
        run_dir = _run_dir(args, cfg, args.variant or cfg.get("algo.variant"), args.seed or 0)
        return _train_game(cfg, args, run_dir)
    else:
        raise cfg.error(f"'train' cannot run a config of kind {cfg.kind!r}", "run.kind")
    print(f"run directory: {run_dir}")
    return 0


def _train_game(cfg: RunConfig, args, run_dir: Path) -> int:
    import numpy as np
    from magics_lab.algos.game_trainer import GameTrainConfig, magics_train_game
    from magics_lab.algos.schedules import LearningRateSchedule
    from magics_lab.games import TrilevelQuadraticGame

    extra = {"variant": args.variant} if args.variant else {}
    gc = build_dataclass(GameTrainConfig, cfg, "algo", extra,
                         convert={"critic_schedule": LearningRateSchedule.from_config,
                                  "actor_schedule": LearningRateSchedule.from_config})
    seed = args.seed if args.seed is not None else cfg.get("game.seed", 0)
    if cfg.get("game.kind") != "trilevel-quadratic":
        raise cfg.error("game.kind must be 'trilevel-quadratic'", "game.kind")
    dims = {k: cfg.get(f"game.{k}") for k in ("n_omega", "n_theta", "n_psi") if cfg.get(f"game.{k}") is not None}
    game = TrilevelQuadraticGame.random(np.random.default_rng(seed), **dims)
    res = magics_train_game(game, gc)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "metrics.jsonl", "w") as fh:
        for rec in res.metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = {"iterations": res.iterations, "converged": res.converged, "diverged": res.diverged,
               "dse": bool(res.certificate and res.certificate.is_dse),
               "distance_to_dse": float(np.linalg.norm(np.concatenate([res.omega, res.theta, res.psi])
                                                       - np.concatenate(game.dse())))}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    print(f"run directory: {run_dir}")
    return 0 if summary["dse"] else 1


def cmd_tournament(args) -> int:
    from magics_lab.harness.tournament import TournamentSpec, run_tournament
    cfg = load_config(args.config)
    if cfg.kind != "tournament":
        raise cfg.error("'tournament' needs a config of kind 'tournament'", "run.kind")
    spec = build_dataclass(TournamentSpec, cfg, "tournament")
    out = _out_root(args, cfg) / (cfg.path.stem if cfg.path else "tournament")
    res = run_tournament(spec, out, threads=args.threads)
    for c in res.controllers:
        print(c, " ".join(f"{d}={res.mean(c, d):.3f}±{res.std(c, d):.3f}" for d in res.disturbances))
    print(f"results: {out}")
    return 0


def cmd_exploit(args) -> int:
    from magics_lab.harness.exploit import exploit
    cfg = load_config(args.config)
    if cfg.kind != "exploit":
        raise cfg.error("'exploit' needs a config of kind 'exploit'", "run.kind")
    oc = _offpolicy_config(cfg, args)
    controller = cfg.get("exploit.controller")
    run_dir = _run_dir(args, cfg, oc.variant, oc.seed)
    report = exploit(controller, oc, run_dir, eval_every=cfg.get("exploit.eval_every", 10_000),
                     eval_games=cfg.get("exploit.eval_games", 100), log=_print)
    print(json.dumps({k: v for k, v in report.items() if k not in ("curve", "result")}, sort_keys=True))
    print(f"run directory: {run_dir}")
    return 0 if report["controller_unchanged"] else 1


def cmd_oracle(args) -> int:
    from magics_lab.envs import make_env
    from magics_lab.safety import save_value_grid, solve_isaacs
    opts = {"env": args.env, "gamma": 0.99, "variant": "avoid_only", "resolution": [161, 161],
            "u_levels": 9, "d_levels": 5, "tol": 1e-6, "max_sweeps": 20_000}
    cfg = None
    if args.config:
        cfg = load_config(args.config)
        if cfg.kind != "oracle":
            raise cfg.error("'oracle' needs a config of kind 'oracle'", "run.kind")
        opts["env"] = cfg.get("env.name")
        for k, v in cfg.section("oracle").items():
            if k not in opts:
                raise cfg.error(f"unknown key 'oracle.{k}'", f"oracle.{k}")
            opts[k] = v
    if not opts["env"]:
        print("error: oracle needs --env or --config", file=sys.stderr)
        return 2
    if opts["env"] != "double-integrator":
        print(f"error: the tabular oracle supports only double-integrator, got {opts['env']!r}", file=sys.stderr)
        return 2
    env = make_env(opts.pop("env"))
    grid = solve_isaacs(env, resolution=tuple(opts.pop("resolution")), **opts)
    out = _out_root(args, cfg) / f"oracle-{grid.variant}-gamma{grid.gamma:g}"
    out.mkdir(parents=True, exist_ok=True)
    save_value_grid(out / "value_grid.bin", grid)
    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "residual"])
        for i, r in enumerate(grid.diagnostics["residuals"], 1):
            w.writerow([i, f"{r:.6e}"])
    d = grid.diagnostics
    print(f"sweeps={d['sweeps']} converged={d['converged']} final_residual={d['residuals'][-1]:.3e}")
    print(f"results: {out}")
    return 0 if d["converged"] else 1


def cmd_verify(args) -> int:
    from magics_lab.harness.verify import run_checks
    return 0 if run_checks(seed=args.seed or 0) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magics-lab", description="Stackelberg-minimax adversarial RL experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="TOML run configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=None, help=f"output root (the {OUT_ENV} variable takes precedence)")
        sp.add_argument("--variant", default=None, help="magics, ablation or baseline")
        sp.add_argument("--threads", type=int, default=1)
        return sp

    common(sub.add_parser("train", help="train agents from a config")).set_defaults(fn=cmd_train)
    common(sub.add_parser("tournament", help="round-robin evaluation")).set_defaults(fn=cmd_tournament)
    common(sub.add_parser("exploit", help="train a disturbance against a frozen controller")).set_defaults(fn=cmd_exploit)
    sp = common(sub.add_parser("oracle", help="solve the tabular Isaacs equation"), config_required=False)
    sp.add_argument("--env", default=None)
    sp.set_defaults(fn=cmd_oracle)
    common(sub.add_parser("verify", help="analytic-game checks"), config_required=False).set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
