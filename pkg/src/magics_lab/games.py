"""Analytic quadratic games with closed-form equilibria.

These are the ground truth for the learning dynamics: every derivative has a
closed form, stationary points come from one linear solve, and local
stability of gradient play reduces to eigenvalues of a constant Jacobian.

Sign conventions follow the actor game: the controller ``theta`` maximizes
``J`` and the disturbance ``psi`` minimizes it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import jax.numpy as jnp
import numpy as np

from magics_lab.diffcore import dense_hessian, gradient, mixed_partial_block

DEFINITENESS_TOL = 1e-8
HURWITZ_TOL = 1e-9
TAU_SEARCH_MAX = 1e6


class DegenerateGameError(ValueError):
    pass


def _matrix(x, shape=None) -> np.ndarray:
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if shape is not None and m.shape != shape:
        m = m.reshape(shape)
    return m


def _vector(x, n: int) -> np.ndarray:
    if x is None:
        return np.zeros(n)
    v = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if v.size != n:
        raise ValueError(f"expected a vector of length {n}, got {v.size}")
    return v


@dataclass(frozen=True)
class QuadraticZeroSumGame:
    """J(theta, psi) = 1/2 theta'A theta + theta'B psi + 1/2 psi'C psi + a'theta + c'psi."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    a: np.ndarray = None
    c: np.ndarray = None

    def __post_init__(self):
        A, C = _matrix(self.A), _matrix(self.C)
        B = _matrix(self.B, (A.shape[0], C.shape[0]))
        if A.shape[0] != A.shape[1] or C.shape[0] != C.shape[1]:
            raise ValueError("A and C must be square")
        object.__setattr__(self, "A", 0.5 * (A + A.T))
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", 0.5 * (C + C.T))
        object.__setattr__(self, "a", _vector(self.a, A.shape[0]))
        object.__setattr__(self, "c", _vector(self.c, C.shape[0]))

    @classmethod
    def from_config(cls, section: Mapping) -> "QuadraticZeroSumGame":
        """Build from a config section holding row-major matrix literals ``A``, ``B``, ``C``."""
        missing = [k for k in ("A", "B", "C") if k not in section]
        if missing:
            raise KeyError(missing[0])
        return cls(section["A"], section["B"], section["C"], section.get("a"), section.get("c"))

    @property
    def n_theta(self) -> int:
        return self.A.shape[0]

    @property
    def n_psi(self) -> int:
        return self.C.shape[0]

    def objective(self, theta, psi):
        A, B, C = jnp.asarray(self.A), jnp.asarray(self.B), jnp.asarray(self.C)
        return (0.5 * theta @ A @ theta + theta @ B @ psi + 0.5 * psi @ C @ psi
                + jnp.asarray(self.a) @ theta + jnp.asarray(self.c) @ psi)

    def grad_theta(self, theta, psi) -> np.ndarray:
        return self.A @ theta + self.B @ psi + self.a

    def grad_psi(self, theta, psi) -> np.ndarray:
        return self.B.T @ theta + self.C @ psi + self.c

    def flow_jacobian(self, tau: float) -> np.ndarray:
        """Jacobian of the tau-GDA limiting flow (grad_theta J, -tau grad_psi J)."""
        return np.block([[self.A, self.B], [-tau * self.B.T, -tau * self.C]])


def stationary_point(g: QuadraticZeroSumGame) -> tuple[np.ndarray, np.ndarray]:
    """Solve [A B; B' C][theta; psi] = -[a; c]."""
    M = np.block([[g.A, g.B], [g.B.T, g.C]])
    rhs = -np.concatenate([g.a, g.c])
    if np.linalg.matrix_rank(M) < M.shape[0]:
        raise DegenerateGameError("the stationarity system [A B; B' C] is singular")
    y = np.linalg.solve(M, rhs)
    return y[:g.n_theta], y[g.n_theta:]


@dataclass(frozen=True)
class DseCertificate:
    grad_norm_theta: float
    grad_norm_psi: float
    min_eig_psi_hessian: float
    max_eig_reduced_hessian: float
    is_dse: bool
    reason: str = ""


def _certify(g_theta, g_psi, H_tt, H_tp, H_pp, eps) -> DseCertificate:
    gn_t, gn_p = float(np.linalg.norm(g_theta)), float(np.linalg.norm(g_psi))
    eig_pp = np.linalg.eigvalsh(H_pp) if H_pp.size else np.array([np.inf])
    min_pp = float(eig_pp.min())
    if np.min(np.abs(eig_pp)) <= DEFINITENESS_TOL:
        return DseCertificate(gn_t, gn_p, min_pp, float("nan"), False,
                              "follower Hessian is singular")
    reduced = H_tt - H_tp @ np.linalg.solve(H_pp, H_tp.T)
    reduced = 0.5 * (reduced + reduced.T)
    max_red = float(np.linalg.eigvalsh(reduced).max()) if reduced.size else -np.inf
    reasons = []
    if not (gn_t < eps and gn_p < eps):
        reasons.append("not stationary")
    if not min_pp > DEFINITENESS_TOL:
        reasons.append("follower Hessian not positive definite")
    if not max_red < -DEFINITENESS_TOL:
        reasons.append("leader reduced Hessian not negative definite")
    return DseCertificate(gn_t, gn_p, min_pp, max_red, not reasons, "; ".join(reasons))


def verify_dse(J: Callable, theta, psi, eps: float = 1e-6) -> DseCertificate:
    """Certify a differential Stackelberg (strict local minimax) point of ``J(theta, psi)``.

    The controller maximizes, so the test is: both gradients below ``eps``,
    the follower Hessian positive definite, and the leader's curvature along
    the follower's best response,
    ``d2J/dtheta2 - d2J/dtheta dpsi (d2J/dpsi2)^-1 d2J/dpsi dtheta``,
    negative definite.
    """
    theta = jnp.asarray(theta, dtype=jnp.float64)
    psi = jnp.asarray(psi, dtype=jnp.float64)
    g_t = gradient(lambda t: J(t, psi), theta)
    g_p = gradient(lambda p: J(theta, p), psi)
    H_tt = dense_hessian(lambda t: J(t, psi), theta)
    H_pp = dense_hessian(lambda p: J(theta, p), psi)
    H_tp = mixed_partial_block(J, theta, psi)
    return _certify(g_t, g_p, H_tt, H_tp, H_pp, eps)


def closed_form_certificate(g: QuadraticZeroSumGame, theta, psi, eps: float = 1e-6) -> DseCertificate:
    theta, psi = np.asarray(theta, float), np.asarray(psi, float)
    return _certify(g.grad_theta(theta, psi), g.grad_psi(theta, psi), g.A, g.B, g.C, eps)


def is_hurwitz(M: np.ndarray, tol: float = HURWITZ_TOL) -> bool:
    return bool(np.linalg.eigvals(M).real.max() < -tol)


def critical_tau(g: QuadraticZeroSumGame, tau_max: float = TAU_SEARCH_MAX,
                 tol: float = HURWITZ_TOL) -> float | None:
    """Smallest ratio tau* such that the tau-GDA flow Jacobian is Hurwitz for every tau > tau*.

    Returns None when no tau up to ``tau_max`` stabilizes the flow.
    """
    # the follower's eigenvalues shrink like tau, so the real-part tolerance does too
    stable = lambda tau: is_hurwitz(g.flow_jacobian(tau), tol * min(1.0, tau))  # noqa: E731
    if not stable(tau_max):
        return None
    # the Hurwitz region need not be an interval near 0, so scan before bisecting
    grid = np.geomspace(1e-10, tau_max, 2001)
    flags = np.array([stable(t) for t in grid])
    if flags.all():
        return 0.0
    last_bad = int(np.nonzero(~flags)[0].max())
    lo, hi = grid[last_bad], grid[last_bad + 1]
    while hi - lo > 1e-12 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if stable(mid):
            hi = mid
        else:
            lo = mid
    return float(hi)


@dataclass(frozen=True)
class TrilevelQuadraticGame:
    """Critic/controller/disturbance game with quadratic objectives.

    With y = (theta, psi) and z = (omega, theta, psi)::

        J(omega, y) = 1/2 y'Hy + y'K omega + j'y + 1/2 omega'M omega
        L(z)        = 1/2 z'Pz + p'z

    H has blocks [A B; B' C].  The actors' response to a critic ``omega`` is
    ``y*(omega) = -H^-1 (K omega + j)``.
    """

    H: np.ndarray
    K: np.ndarray
    j: np.ndarray
    M: np.ndarray
    P: np.ndarray
    p: np.ndarray
    n_theta: int
    n_psi: int
    n_omega: int = field(init=False)

    def __post_init__(self):
        H = _matrix(self.H)
        ny = self.n_theta + self.n_psi
        if H.shape != (ny, ny):
            raise ValueError(f"H must be {ny}x{ny}")
        K = _matrix(self.K)
        if K.shape[0] != ny:
            raise ValueError("K must have one row per actor parameter")
        n_omega = K.shape[1]
        nz = n_omega + ny
        P = _matrix(self.P, (nz, nz))
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "j", _vector(self.j, ny))
        object.__setattr__(self, "M", 0.5 * (_matrix(self.M, (n_omega, n_omega)) + _matrix(self.M, (n_omega, n_omega)).T))
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "p", _vector(self.p, nz))
        object.__setattr__(self, "n_omega", n_omega)
        if np.linalg.matrix_rank(self.H) < ny:
            raise DegenerateGameError("actor Hessian H is singular; no response map")

    @classmethod
    def random(cls, rng: np.random.Generator, n_omega: int = 3, n_theta: int = 2, n_psi: int = 2,
               coupling: float = 0.5) -> "TrilevelQuadraticGame":
        """Random instance whose actor game has a DSE and whose critic problem is strongly convex."""
        def spd(n, lo=0.5, hi=2.0):
            Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
            return Q @ np.diag(rng.uniform(lo, hi, n)) @ Q.T

        A = -spd(n_theta)
        C = spd(n_psi)
        B = coupling * rng.standard_normal((n_theta, n_psi))
        H = np.block([[A, B], [B.T, C]])
        K = rng.standard_normal((n_theta + n_psi, n_omega))
        j = rng.standard_normal(n_theta + n_psi)
        M = spd(n_omega)
        P = spd(n_omega + n_theta + n_psi, 0.5, 1.5)
        p = rng.standard_normal(n_omega + n_theta + n_psi)
        return cls(H, K, j, M, P, p, n_theta, n_psi)

    @property
    def actor_game(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        nt = self.n_theta
        return self.H[:nt, :nt], self.H[:nt, nt:], self.H[nt:, nt:]

    def J(self, omega, theta, psi):
        y = jnp.concatenate([theta, psi])
        return (0.5 * y @ jnp.asarray(self.H) @ y + y @ jnp.asarray(self.K) @ omega
                + jnp.asarray(self.j) @ y + 0.5 * omega @ jnp.asarray(self.M) @ omega)

    def L(self, omega, theta, psi):
        z = jnp.concatenate([omega, theta, psi])
        return 0.5 * z @ jnp.asarray(self.P) @ z + jnp.asarray(self.p) @ z

    def actor_gradients(self, omega, theta, psi) -> tuple[np.ndarray, np.ndarray]:
        y = np.concatenate([theta, psi])
        g = self.H @ y + self.K @ omega + self.j
        return g[:self.n_theta], g[self.n_theta:]

    def response(self, omega) -> tuple[np.ndarray, np.ndarray]:
        y = -np.linalg.solve(self.H, self.K @ np.asarray(omega, float) + self.j)
        return y[:self.n_theta], y[self.n_theta:]

    def response_jacobian(self) -> np.ndarray:
        return -np.linalg.solve(self.H, self.K)

    def critic_partials(self, omega, theta, psi) -> np.ndarray:
        z = np.concatenate([omega, theta, psi])
        return self.P @ z + self.p

    def closed_form_total_derivative(self, omega, theta, psi) -> np.ndarray:
        """grad_omega L + (dy*/domega)' grad_y L with the response Jacobian from the implicit-function system."""
        g = self.critic_partials(omega, theta, psi)
        no = self.n_omega
        return g[:no] + self.response_jacobian().T @ g[no:]

    def reduced_critic_gradient(self, omega) -> np.ndarray:
        """Gradient of omega -> L(omega, y*(omega)) assembled from the affine response map."""
        omega = np.asarray(omega, float)
        R = self.response_jacobian()
        s = -np.linalg.solve(self.H, self.j)
        T = np.vstack([np.eye(self.n_omega), R])
        offset = np.concatenate([np.zeros(self.n_omega), s])
        return T.T @ (self.P @ (T @ omega + offset) + self.p)

    def reduced_critic_hessian(self) -> np.ndarray:
        T = np.vstack([np.eye(self.n_omega), self.response_jacobian()])
        return T.T @ self.P @ T

    def dse(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """The unique critic stationary point on the response manifold and the actors' response there."""
        Hr = self.reduced_critic_hessian()
        omega = -np.linalg.solve(Hr, self.reduced_critic_gradient(np.zeros(self.n_omega)))
        theta, psi = self.response(omega)
        return omega, theta, psi
