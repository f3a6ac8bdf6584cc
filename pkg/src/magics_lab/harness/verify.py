"""Analytic-game checks run by ``magics-lab verify``.

Each check prints one ``PASS``/``FAIL`` line; together they cover gradient
exactness on random trilevel games, the tau-GDA stability threshold and
convergence of the full trainer to a certified equilibrium.
"""

from __future__ import annotations

import time

import numpy as np

from magics_lab.algos.game_trainer import GameTrainConfig, magics_train_game
from magics_lab.algos.gda import DivergenceError, tau_gda
from magics_lab.algos.stackelberg import stackelberg_total_derivative
from magics_lab.games import QuadraticZeroSumGame, TrilevelQuadraticGame, critical_tau

THRESHOLD_GAME = QuadraticZeroSumGame([[1.0]], [[3.0]], [[0.1]])
# stop well inside the certificate tolerance
TIGHT = GameTrainConfig(eps_c=1e-5, eps_u=1e-5, eps_d=1e-5)


def check_gradient_exactness(seed: int = 0, n: int = 20) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        g = TrilevelQuadraticGame.random(rng)
        w, t, p = rng.standard_normal(g.n_omega), rng.standard_normal(g.n_theta), rng.standard_normal(g.n_psi)
        got = stackelberg_total_derivative(g.L, g.J, w, t, p, mode="exact")
        want = g.closed_form_total_derivative(w, t, p)
        worst = max(worst, np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-300))
    return worst < 1e-8, f"max relative error {worst:.2e} over {n} games"


def check_tau_threshold(lr: float = 0.002) -> tuple[bool, str]:
    g = THRESHOLD_GAME
    grad = lambda t, p: (g.grad_theta(t, p), g.grad_psi(t, p))  # noqa: E731
    try:
        tau_gda(grad, [1.0], [1.0], lr, 1.0, max_iter=100_000)
        diverged = False
    except DivergenceError:
        diverged = True
    res = tau_gda(grad, [1.0], [1.0], lr, 20.0, eps_u=1e-8, eps_d=1e-8, max_iter=100_000)
    dist = float(np.linalg.norm(np.concatenate([res.theta, res.psi])))
    tau_star = critical_tau(g)
    ok = diverged and res.converged and dist < 1e-6 and tau_star is not None and abs(tau_star - 10) < 1e-6
    return ok, f"tau=1 diverged={diverged}, tau=20 distance {dist:.1e}, critical tau {tau_star:.9g}"


def check_convergence(seed: int = 0, n: int = 10) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    iters, ok = [], True
    for _ in range(n):
        res = magics_train_game(TrilevelQuadraticGame.random(rng), TIGHT, eps_certificate=1e-4)
        ok &= bool(res.certificate is not None and res.certificate.is_dse)
        iters.append(res.iterations)
    return ok and max(iters) <= 100_000, f"iterations per game {min(iters)}..{max(iters)}"


CHECKS = {"stackelberg gradient exactness": check_gradient_exactness,
          "tau-GDA threshold": check_tau_threshold,
          "trainer convergence to a DSE": check_convergence}


def run_checks(seed: int = 0) -> bool:
    all_ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        ok, detail = fn(seed) if name != "tau-GDA threshold" else fn()
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t0:.1f} s)", flush=True)
    return all_ok
