"""Long-running experiment suites with an on-disk result cache.

A cached result is reused only when both its parameters and the code that
produced it are unchanged.  The code fingerprint is taken over the syntax
trees of the computational modules with docstrings removed, so editing
documentation does not throw away hours of training.

Run from the command line to fill the cache ahead of the test suite::

    python -m magics_lab.harness.experiments --root .experiment_cache pendulum safety cost
"""

from __future__ import annotations

import argparse
import ast
import hashlib
import json
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

import magics_lab
from magics_lab.algos.offpolicy import OffPolicyConfig, benchmark_update, strip_timing, train_offpolicy

CODE_MODULES = ("algos/offpolicy.py", "algos/sac.py", "algos/stackelberg.py", "algos/buffer.py", "policies.py",
                "envs.py", "safety.py", "harness/tournament.py")

PENDULUM = dict(env="pendulum", objective="sac", total_steps=300_000, buffer_size=300_000, fisher_damping=1.0)
# fixed low temperatures: adaptive ones keep the disturbance soft and the learned set too large
SAFETY = dict(env="double-integrator", objective="isaacs", total_steps=200_000, buffer_size=200_000, gamma=0.99,
              fisher_damping=1.0, learn_temperature=False, eta_u=0.01, eta_d=0.01)
SEEDS = (0, 1, 2, 3, 4)


def _strip_docstrings(tree: ast.AST) -> ast.AST:
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            body = node.body
            if body and isinstance(body[0], ast.Expr) and isinstance(getattr(body[0], "value", None), ast.Constant) \
                    and isinstance(body[0].value.value, str):
                node.body = body[1:] or [ast.Pass()]
    return tree


def code_fingerprint(modules=CODE_MODULES) -> str:
    root = Path(magics_lab.__file__).parent
    h = hashlib.sha256()
    for rel in modules:
        tree = _strip_docstrings(ast.parse((root / rel).read_text()))
        h.update(rel.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


def cache_key(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, default=str) + code_fingerprint()
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ExperimentCache:
    def __init__(self, root):
        self.root = Path(root)

    def run_dir(self, name: str, params: dict) -> Path:
        return self.root / f"{name}-{cache_key(params)}"

    def done(self, run_dir: Path) -> bool:
        return (run_dir / "DONE").exists()

    def mark_done(self, run_dir: Path, info: dict | None = None) -> None:
        (run_dir / "DONE").write_text(json.dumps(info or {}, sort_keys=True))

    def fresh(self, run_dir: Path) -> Path:
        if run_dir.exists():
            shutil.rmtree(run_dir)
        run_dir.mkdir(parents=True)
        return run_dir


def _say(msg: str) -> None:
    print(time.strftime("%H:%M:%S"), msg, flush=True)


# -- pendulum tournament ------------------------------------------------------------------------

def pendulum_run(cache: ExperimentCache, variant: str, seed: int, steps: int | None = None) -> Path:
    cfg = OffPolicyConfig(**{**PENDULUM, "variant": variant, "seed": seed,
                             **({"total_steps": steps, "buffer_size": steps} if steps else {})})
    run_dir = cache.run_dir(f"pendulum-{variant}-seed{seed}", cfg.to_dict())
    if not cache.done(run_dir):
        _say(f"training pendulum {variant} seed {seed} ({cfg.total_steps} steps)")
        t0 = time.perf_counter()
        res = train_offpolicy(cfg, cache.fresh(run_dir))
        per_step = [r["wall_time_per_step"] for r in res.metrics[5:]]
        cache.mark_done(run_dir, {"seconds": time.perf_counter() - t0, "median_step_s": float(np.median(per_step))})
    return run_dir


def pendulum_suite(root, seeds=SEEDS, steps: int | None = None, sets: int = 5, games: int = 100) -> dict:
    """Train both variants on every seed, then play the tournament on the trained checkpoints."""
    from magics_lab.harness.tournament import TournamentSpec, run_tournament
    cache = ExperimentCache(root)
    runs = {v: [pendulum_run(cache, v, s, steps) for s in seeds] for v in ("magics", "baseline")}
    ckpt = {v: [str(d / "checkpoint.bin") for d in dirs] for v, dirs in runs.items()}
    spec = TournamentSpec("pendulum", controllers=dict(ckpt), disturbances={"zero": "zero", **ckpt},
                          sets=len(seeds), games_per_set=games)
    out = cache.run_dir("pendulum-tournament", {"runs": [str(p) for p in ckpt["magics"] + ckpt["baseline"]],
                                               "games": games})
    if not cache.done(out):
        _say("playing tournament")
        run_tournament(spec, cache.fresh(out))
        cache.mark_done(out)
    timing = {v: [json.loads((d / "DONE").read_text())["median_step_s"] for d in dirs] for v, dirs in runs.items()}
    return {"runs": {v: [str(d) for d in dirs] for v, dirs in runs.items()}, "tournament": str(out),
            "median_step_s": timing}


def read_sets(tournament_dir) -> dict:
    """``{(controller, disturbance): [win rate per set]}`` from ``sets.csv``."""
    import csv
    out: dict = {}
    with open(Path(tournament_dir) / "sets.csv") as fh:
        for row in csv.DictReader(fh):
            out.setdefault((row["controller"], row["disturbance"]), []).append(float(row["win_rate"]))
    return out


# -- safety ----------------------------------------------------------------------------------------

def safety_suite(root, seeds=SEEDS, steps: int | None = None) -> dict:
    from magics_lab.safety import magics_safety_train, solve_isaacs
    cache = ExperimentCache(root)
    oracle = None
    results = {}
    for seed in seeds:
        cfg = OffPolicyConfig(**{**SAFETY, "variant": "magics", "seed": seed,
                                 **({"total_steps": steps, "buffer_size": steps} if steps else {})})
        run_dir = cache.run_dir(f"safety-seed{seed}", cfg.to_dict())
        if not cache.done(run_dir):
            if oracle is None:
                _say("solving the tabular oracle")
                oracle = solve_isaacs(gamma=cfg.gamma, variant="avoid_only")
            _say(f"training safety seed {seed} ({cfg.total_steps} steps)")
            run = magics_safety_train(cfg, oracle, cache.fresh(run_dir))
            cache.mark_done(run_dir, {"final_agreement": run.final_agreement})
        results[seed] = json.loads((run_dir / "DONE").read_text())["final_agreement"]
    return {"agreement": results, "median": float(np.median(list(results.values())))}


def filter_oracle(root, gamma: float = 0.999, resolution=(161, 161)):
    """Long-horizon tabular value used to monitor the safety filter, solved once and cached."""
    from magics_lab.safety import load_value_grid, save_value_grid, solve_isaacs
    cache = ExperimentCache(root)
    run_dir = cache.run_dir("filter-oracle", {"gamma": gamma, "resolution": list(resolution)})
    if not cache.done(run_dir):
        _say(f"solving the gamma={gamma} oracle")
        save_value_grid(cache.fresh(run_dir) / "value_grid.bin", solve_isaacs(gamma=gamma, resolution=resolution))
        cache.mark_done(run_dir)
    return load_value_grid(run_dir / "value_grid.bin")


# -- cost ------------------------------------------------------------------------------------------

def cost_benchmark(root, repeats: int = 50, exact_repeats: int = 3) -> dict:
    cache = ExperimentCache(root)
    params = {"pendulum": PENDULUM, "repeats": repeats, "exact_repeats": exact_repeats}
    run_dir = cache.run_dir("cost", params)
    path = run_dir / "cost.json"
    if not cache.done(run_dir):
        _say("benchmarking update steps")
        base = OffPolicyConfig(**{**PENDULUM, "variant": "baseline"})
        ef = replace(base, variant="magics")
        exact = replace(ef, stackelberg_mode="exact")
        out = {"baseline": benchmark_update(base, repeats), "empirical_fisher": benchmark_update(ef, repeats),
               "exact": benchmark_update(exact, exact_repeats)}
        out["ratio_empirical_fisher"] = out["empirical_fisher"]["median_s"] / out["baseline"]["median_s"]
        out["ratio_exact"] = out["exact"]["median_s"] / out["baseline"]["median_s"]
        cache.fresh(run_dir)
        path.write_text(json.dumps(out, indent=2, sort_keys=True))
        cache.mark_done(run_dir)
    return json.loads(path.read_text())


def metrics_bytes(run_dir) -> bytes:
    """``metrics.jsonl`` with wall-clock fields removed, for determinism comparisons."""
    lines = Path(run_dir, "metrics.jsonl").read_text().splitlines()
    recs = strip_timing([json.loads(line) for line in lines])
    return "\n".join(json.dumps(r, sort_keys=True) for r in recs).encode()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="fill the experiment cache")
    p.add_argument("suites", nargs="+", choices=("pendulum", "safety", "cost"))
    p.add_argument("--root", default=".experiment_cache")
    p.add_argument("--seeds", type=int, nargs="*", default=list(SEEDS))
    args = p.parse_args(argv)
    for suite in args.suites:
        if suite == "pendulum":
            print(json.dumps(pendulum_suite(args.root, args.seeds), indent=2))
        elif suite == "safety":
            print(json.dumps(safety_suite(args.root, args.seeds), indent=2))
        else:
            print(json.dumps(cost_benchmark(args.root), indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
