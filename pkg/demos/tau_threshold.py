"""How much faster must the disturbance learn?  tau-GDA on a scalar game.

    J(theta, psi) = 1/2 theta^2 + 3 theta psi + 0.05 psi^2

The controller ascends and the disturbance descends tau times faster.  The
point (0, 0) is a local minimax, yet plain GDA (tau = 1) spirals away from
it.  The continuous-time flow is stable only for tau above a critical ratio,
which for this game is 10.

    python3 demos/tau_threshold.py
"""

import numpy as np

from magics_lab.algos.gda import DivergenceError, tau_gda
from magics_lab.games import QuadraticZeroSumGame, closed_form_certificate, critical_tau

game = QuadraticZeroSumGame(A=[[1.0]], B=[[3.0]], C=[[0.1]])
cert = closed_form_certificate(game, np.zeros(1), np.zeros(1))
print(f"origin is a local minimax: {cert.is_dse}")
print(f"critical tau: {critical_tau(game):.9f}\n")

for tau in (2.0, 8.0, 9.9, 10.1, 12.0):
    eig = np.linalg.eigvals(game.flow_jacobian(tau))
    print(f"tau={tau:5.1f}  largest real part of the flow Jacobian {eig.real.max():+.4f}")

# Discrete steps also need a small enough learning rate.  0.002 is below the
# limit for every tau tried here.
grad = lambda t, p: (game.grad_theta(t, p), game.grad_psi(t, p))  # noqa: E731
print()
for tau in (1.0, 5.0, 20.0):
    try:
        res = tau_gda(grad, [1.0], [1.0], 0.002, tau, eps_u=1e-8, eps_d=1e-8, max_iter=100_000)
        print(f"tau={tau:4.0f}: converged={res.converged} after {res.iterations} steps, "
              f"|y| = {np.hypot(res.theta[0], res.psi[0]):.1e}")
    except DivergenceError as exc:
        print(f"tau={tau:4.0f}: {exc}")
