import jax.numpy as jnp
import numpy as np
import pytest

from magics_lab.algos.gda import DivergenceError, tau_gda
from magics_lab.games import (DegenerateGameError, QuadraticZeroSumGame, TrilevelQuadraticGame,
                              closed_form_certificate, critical_tau, stationary_point, verify_dse)


def scalar(A, B, C, a=0.0, c=0.0):
    return QuadraticZeroSumGame([[A]], [[B]], [[C]], [a], [c])


def random_game(rng, nt=3, np_=2):
    A = rng.standard_normal((nt, nt))
    C = rng.standard_normal((np_, np_))
    return QuadraticZeroSumGame(-(A @ A.T) - np.eye(nt), rng.standard_normal((nt, np_)), C @ C.T + np.eye(np_),
                                rng.standard_normal(nt), rng.standard_normal(np_))


class TestQuadraticGame:
    def test_symmetrized_on_construction(self):
        g = QuadraticZeroSumGame([[1.0, 2.0], [0.0, 1.0]], np.ones((2, 1)), [[1.0]])
        np.testing.assert_array_equal(g.A, g.A.T)

    def test_gradients_match_autodiff(self, rng):
        from magics_lab.diffcore import dense_hessian, gradient
        g = random_game(rng)
        t, p = rng.standard_normal(3), rng.standard_normal(2)
        np.testing.assert_allclose(gradient(lambda x: g.objective(x, jnp.asarray(p)), t), g.grad_theta(t, p),
                                   atol=1e-12)
        np.testing.assert_allclose(gradient(lambda x: g.objective(jnp.asarray(t), x), p), g.grad_psi(t, p), atol=1e-12)
        np.testing.assert_allclose(dense_hessian(lambda x: g.objective(x, jnp.asarray(p)), t), g.A, atol=1e-12)

    def test_from_config_names_missing_matrix(self):
        with pytest.raises(KeyError, match="C"):
            QuadraticZeroSumGame.from_config({"A": [[1.0]], "B": [[1.0]]})

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            QuadraticZeroSumGame(np.ones((2, 3)), np.ones((2, 1)), [[1.0]])


class TestStationaryPoint:
    def test_homogeneous(self):
        np.testing.assert_allclose(stationary_point(scalar(-1, 1, 1)), [[0.0], [0.0]])

    def test_linear_terms(self):
        theta, psi = stationary_point(scalar(-2, 1, 1, a=1.0))
        np.testing.assert_allclose([theta[0], psi[0]], [1 / 3, -1 / 3], atol=1e-14)

    def test_gradient_residual(self, rng):
        for _ in range(20):
            g = random_game(rng)
            t, p = stationary_point(g)
            assert np.linalg.norm(g.grad_theta(t, p)) < 1e-10 and np.linalg.norm(g.grad_psi(t, p)) < 1e-10

    def test_degenerate(self):
        with pytest.raises(DegenerateGameError):
            stationary_point(scalar(1, 1, 1))


class TestVerifyDse:
    def test_scalar_dse(self):
        g = scalar(-2, 1, 1)
        cert = verify_dse(g.objective, np.zeros(1), np.zeros(1))
        assert cert.is_dse
        assert cert.max_eig_reduced_hessian == pytest.approx(-3.0)

    def test_bilinear_not_dse(self):
        cert = verify_dse(scalar(0, 1, 0).objective, np.zeros(1), np.zeros(1))
        assert not cert.is_dse and "singular" in cert.reason

    def test_convex_leader_with_strong_coupling(self):
        cert = verify_dse(scalar(1, 3, 0.1).objective, np.zeros(1), np.zeros(1))
        assert cert.is_dse
        assert cert.max_eig_reduced_hessian == pytest.approx(-89.0)

    def test_not_stationary(self):
        cert = verify_dse(scalar(-2, 1, 1).objective, np.ones(1), np.zeros(1))
        assert not cert.is_dse and "not stationary" in cert.reason

    def test_agrees_with_closed_form(self, rng):
        for _ in range(20):
            g = random_game(rng)
            t, p = stationary_point(g)
            auto, closed = verify_dse(g.objective, t, p), closed_form_certificate(g, t, p)
            assert auto.is_dse == closed.is_dse
            assert auto.max_eig_reduced_hessian == pytest.approx(closed.max_eig_reduced_hessian, abs=1e-10)


class TestCriticalTau:
    def test_always_stable(self):
        assert critical_tau(scalar(-2, 1, 1)) == 0.0

    def test_threshold_ten(self):
        assert critical_tau(scalar(1, 3, 0.1)) == pytest.approx(10.0, abs=1e-6)

    def test_bilinear_never_stable(self):
        assert critical_tau(scalar(0, 1, 0)) is None

    def test_tau_above_threshold_converges(self, rng):
        """Stable flow plus a small enough step: tau-GDA reaches the DSE from a nearby start."""
        for _ in range(5):
            g = random_game(rng, 2, 2)
            t_star, p_star = stationary_point(g)
            tau = (critical_tau(g) or 0.0) + 1.0
            lam = np.linalg.eigvals(g.flow_jacobian(tau))
            lr = 0.5 * float(np.min(-2 * lam.real / np.abs(lam) ** 2))
            d = rng.standard_normal(4)
            d *= 0.1 / np.linalg.norm(d)
            res = tau_gda(lambda t, p: (g.grad_theta(t, p), g.grad_psi(t, p)), t_star + d[:2], p_star + d[2:],
                          lr, tau, eps_u=1e-10, eps_d=1e-10, max_iter=200_000)
            assert res.converged
            np.testing.assert_allclose(np.concatenate([res.theta, res.psi]), np.concatenate([t_star, p_star]),
                                       atol=1e-8)

    def test_below_threshold_diverges(self):
        g = scalar(1, 3, 0.1)
        with pytest.raises(DivergenceError):
            tau_gda(lambda t, p: (g.grad_theta(t, p), g.grad_psi(t, p)), [0.1], [0.1], 0.002, 1.0, max_iter=200_000)


class TestTrilevelGame:
    def test_random_instance_properties(self, rng):
        g = TrilevelQuadraticGame.random(rng)
        A, B, C = g.actor_game
        assert np.linalg.eigvalsh(C).min() > 0
        assert np.linalg.eigvalsh(A - B @ np.linalg.solve(C, B.T)).max() < 0
        assert np.abs(g.K).min() > 0  # full critic-actor coupling

    def test_response_is_stationary(self, rng):
        g = TrilevelQuadraticGame.random(rng)
        w = rng.standard_normal(g.n_omega)
        gt, gp = g.actor_gradients(w, *g.response(w))
        assert np.linalg.norm(gt) < 1e-10 and np.linalg.norm(gp) < 1e-10

    def test_closed_form_total_derivative_is_reduced_gradient(self, rng):
        g = TrilevelQuadraticGame.random(rng)
        w = rng.standard_normal(g.n_omega)
        np.testing.assert_allclose(g.closed_form_total_derivative(w, *g.response(w)), g.reduced_critic_gradient(w),
                                   atol=1e-12)

    def test_dse_is_critic_stationary_and_actor_dse(self, rng):
        g = TrilevelQuadraticGame.random(rng)
        w, t, p = g.dse()
        assert np.linalg.norm(g.reduced_critic_gradient(w)) < 1e-10
        assert verify_dse(lambda a, b: g.J(jnp.asarray(w), a, b), t, p, 1e-9).is_dse

    def test_singular_actor_hessian(self):
        with pytest.raises(DegenerateGameError):
            TrilevelQuadraticGame(np.zeros((2, 2)), np.ones((2, 1)), np.zeros(2), [[1.0]], np.eye(3), np.zeros(3), 1, 1)
