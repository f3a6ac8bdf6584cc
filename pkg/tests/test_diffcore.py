import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, rel_err, tanh_net
from magics_lab.diffcore import (HessianTooLargeError, ParameterVector, SingularSystemError, dense_hessian,
                                 gradient, hessian_vector_product, mixed_partial_block, solve_linear)


def random_unit(rng, n):
    p = rng.standard_normal(n)
    return p / np.linalg.norm(p)


class TestGradient:
    def test_half_square_norm(self):
        np.testing.assert_allclose(gradient(lambda p: 0.5 * p @ p, np.array([1.0, 2.0])), [1.0, 2.0])

    def test_bilinear(self):
        np.testing.assert_allclose(gradient(lambda p: p[0] * p[1], np.array([3.0, 5.0])), [5.0, 3.0])

    def test_matches_finite_differences_on_random_networks(self, rng):
        f, n = tanh_net()
        assert n == 37
        fd_fn = central_difference(f)
        worst = 0.0
        for _ in range(100):
            p, x = random_unit(rng, n), rng.standard_normal((4, 2))
            fd = fd_fn(p, x)
            worst = max(worst, rel_err(gradient(f, p, x), fd))
        assert worst < 1e-4

    def test_accepts_parameter_vector(self):
        pv = ParameterVector.from_arrays({"a": np.array([1.0, 2.0]), "b": np.array([[3.0]])})
        np.testing.assert_allclose(gradient(lambda p: jnp.sum(p ** 2), pv), [2.0, 4.0, 6.0])

    def test_overflow_is_reported(self):
        with pytest.raises(FloatingPointError):
            gradient(lambda p: jnp.exp(p[0]) ** 2, np.array([800.0]))


class TestHessianVectorProduct:
    def test_identity_hessian(self, rng):
        v = rng.standard_normal(5)
        np.testing.assert_allclose(hessian_vector_product(lambda p: 0.5 * p @ p, np.ones(5), v), v)

    def test_hand_expanded(self):
        hv = hessian_vector_product(lambda p: p[0] ** 2 * p[1], np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(hv, [2.0, 2.0])

    def test_matches_gradient_differences(self, rng):
        f, n = tanh_net()
        g = jax.jit(jax.grad(f))
        worst = 0.0
        for _ in range(100):
            p, v, x = random_unit(rng, n), random_unit(rng, n), rng.standard_normal((4, 2))
            h = 1e-5
            fd = (np.asarray(g(p + h * v, x)) - np.asarray(g(p - h * v, x))) / (2 * h)
            worst = max(worst, rel_err(hessian_vector_product(f, p, v, x), fd))
        assert worst < 1e-3

    def test_agrees_with_dense_hessian(self, rng):
        f, n = tanh_net()
        for _ in range(10):
            p, v, x = random_unit(rng, n), rng.standard_normal(n), rng.standard_normal((4, 2))
            assert rel_err(hessian_vector_product(f, p, v, x), dense_hessian(f, p, x) @ v) < 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            hessian_vector_product(lambda p: p @ p, np.ones(3), np.ones(2))


class TestMixedPartialBlock:
    def test_bilinear_form(self, rng):
        A = rng.standard_normal((3, 4))
        block = mixed_partial_block(lambda p, q: p @ jnp.asarray(A) @ q, rng.standard_normal(3), rng.standard_normal(4))
        np.testing.assert_allclose(block, A, atol=1e-14)

    def test_independent_of_q(self, rng):
        block = mixed_partial_block(lambda p, q: jnp.sum(jnp.sin(p)), rng.standard_normal(3), rng.standard_normal(2))
        assert block.shape == (3, 2) and not block.any()

    def test_matches_finite_differences(self, rng):
        f, n = tanh_net()

        def split(p, q, x):
            return f(jnp.concatenate([p, q]), x)

        gp = jax.grad(split, argnums=0)
        h = 1e-5
        fd_fn = jax.jit(lambda p, q, x: jax.vmap(lambda e: (gp(p, q + h * e, x) - gp(p, q - h * e, x)) / (2 * h),
                                                 out_axes=1)(jnp.eye(q.size)))
        worst = 0.0
        for _ in range(100):
            z, x = random_unit(rng, n), rng.standard_normal((4, 2))
            p, q = z[:20], z[20:]
            block = mixed_partial_block(split, p, q, x)
            fd = np.asarray(fd_fn(p, q, x))
            worst = max(worst, rel_err(block, fd))
        assert worst < 1e-3

    def test_rejects_matrices(self):
        with pytest.raises(ValueError):
            mixed_partial_block(lambda p, q: jnp.sum(p * q), np.ones((2, 2)), np.ones((2, 2)))


class TestDenseHessian:
    def test_quadratic(self, rng):
        M = rng.standard_normal((4, 4))
        M = M + M.T
        np.testing.assert_allclose(dense_hessian(lambda p: 0.5 * p @ jnp.asarray(M) @ p, rng.standard_normal(4)), M,
                                   atol=1e-13)

    def test_hand_expanded(self):
        np.testing.assert_allclose(dense_hessian(lambda p: p[0] ** 2 * p[1], np.array([1.0, 1.0])),
                                   [[2.0, 2.0], [2.0, 0.0]])

    def test_raw_assembly_is_nearly_symmetric(self, rng):
        f, n = tanh_net()
        for _ in range(100):
            H = dense_hessian(f, random_unit(rng, n), rng.standard_normal((4, 2)), symmetrize=False)
            assert np.linalg.norm(H - H.T) / np.linalg.norm(H) < 1e-10

    def test_matches_finite_differences(self, rng):
        f, n = tanh_net()
        g = jax.grad(f)
        h = 1e-5
        fd_fn = jax.jit(lambda p, x: jax.vmap(lambda e: (g(p + h * e, x) - g(p - h * e, x)) / (2 * h))(jnp.eye(n)))
        worst = 0.0
        for _ in range(100):
            p, x = random_unit(rng, n), rng.standard_normal((4, 2))
            fd = np.asarray(fd_fn(p, x))
            worst = max(worst, rel_err(dense_hessian(f, p, x), 0.5 * (fd + fd.T)))
        assert worst < 1e-3

    def test_cap_refusal(self):
        with pytest.raises(HessianTooLargeError, match="cap"):
            dense_hessian(lambda p: p @ p, np.ones(11), cap=10)


class TestSolveLinear:
    def test_identity(self, rng):
        b = rng.standard_normal(4)
        np.testing.assert_allclose(solve_linear(np.eye(4), b), b)

    def test_scaled_identity(self):
        np.testing.assert_allclose(solve_linear(2 * np.eye(2), np.array([4.0, 6.0])), [2.0, 3.0])

    def test_damping(self):
        np.testing.assert_allclose(solve_linear(np.eye(2), np.array([4.0, 6.0]), damping=1.0), [2.0, 3.0])

    def test_residual_on_random_system(self, rng):
        A = rng.standard_normal((50, 50)) + 10 * np.eye(50)
        b = rng.standard_normal(50)
        x = solve_linear(A, b)
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10

    def test_singular_without_damping(self):
        with pytest.raises(SingularSystemError):
            solve_linear(np.zeros((2, 2)), np.ones(2))
        np.testing.assert_allclose(solve_linear(np.zeros((2, 2)), np.ones(2), damping=0.5), [2.0, 2.0])

    def test_not_square(self):
        with pytest.raises(ValueError):
            solve_linear(np.ones((2, 3)), np.ones(2))


class TestParameterVector:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 4)), min_size=1, max_size=4))
    def test_round_trip(self, shapes):
        rng = np.random.default_rng(len(shapes))
        arrays = {f"w{i}": rng.standard_normal(s) for i, s in enumerate(shapes)}
        pv = ParameterVector.from_arrays(arrays)
        assert len(pv) == sum(a.size for a in arrays.values())
        again = ParameterVector.from_arrays(pv.unflatten())
        np.testing.assert_array_equal(again.values, pv.values)
        assert again.layout == pv.layout

    def test_duplicate_names(self):
        with pytest.raises(ValueError, match="duplicate"):
            ParameterVector(np.zeros(2), (("a", (1,)), ("a", (1,))))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ParameterVector(np.zeros(3), (("a", (2,)),))
