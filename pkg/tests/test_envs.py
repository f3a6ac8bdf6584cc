import json

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from magics_lab.envs import (DoubleIntegrator, EnvState, Pendulum, adjudicate, make_env, rollout_trace, wrap_angle,
                             write_trace)


@pytest.fixture
def pend():
    return Pendulum()


@pytest.fixture
def di():
    return DoubleIntegrator()


class TestPendulum:
    def test_reset_is_deterministic(self, pend):
        np.testing.assert_array_equal(pend.reset(7).x, pend.reset(7).x)

    def test_initial_distribution_bounds(self, pend):
        xs = np.asarray(jax.vmap(pend.sample_initial)(jax.random.split(jax.random.PRNGKey(0), 10_000)))
        assert np.all(np.abs(xs[:, 0]) <= np.pi) and np.all(np.abs(xs[:, 1]) <= 1.0)

    def test_upright_rest_is_equilibrium(self, pend):
        res = pend.step(EnvState(np.zeros(2)), 0.0, 0.0)
        np.testing.assert_array_equal(res.next_state.x, np.zeros(2))
        assert res.reward == 0.0

    def test_energy_drift(self, pend):
        """Semi-implicit Euler is symplectic: the energy oscillates but does not trend.

        The drift per step is the slope of a least-squares line through the
        energy over 2000 undamped, unforced steps.
        """
        step = jax.jit(lambda x: pend.transition(x, jnp.zeros(1), jnp.zeros(1)))
        for x0 in ([2.0, 0.5], [0.1, 0.0], [3.0, 0.0], [1.0, 1.0], [-2.5, -1.0]):
            x, energy = jnp.array(x0), []
            for _ in range(2000):
                energy.append(float(pend.energy(x)))
                x = step(x)
            slope = np.polyfit(np.arange(2000), energy, 1)[0]
            assert abs(slope) < 1e-3

    def test_action_clipping(self, pend):
        x = EnvState(np.array([0.3, -0.2]))
        np.testing.assert_array_equal(pend.step(x, 2 * pend.u_max, 0.5).next_state.x,
                                      pend.step(x, pend.u_max, 0.5).next_state.x)
        np.testing.assert_array_equal(pend.step(x, 0.0, 5.0).next_state.x, pend.step(x, 0.0, pend.d_max).next_state.x)

    def test_reward_bounded_and_maximal_upright(self, pend, rng):
        xs = rng.uniform([-np.pi, -8], [np.pi, 8], (1000, 2))
        us = rng.uniform(-2, 2, 1000)
        r = np.array([float(pend.reward(jnp.asarray(x), jnp.array([u]))) for x, u in zip(xs[:50], us[:50])])
        assert np.all(r <= 0) and np.all(np.abs(r) <= pend.reward_bound)
        assert float(pend.reward(jnp.zeros(2), jnp.zeros(1))) == 0.0

    def test_angle_wrapped(self, pend):
        x = pend.step(EnvState(np.array([np.pi - 0.01, 8.0])), 2.0, 1.0).next_state.x
        assert -np.pi < x[0] <= np.pi

    def test_step_is_deterministic(self, pend):
        s = EnvState(np.array([1.0, 0.3]))
        a, b = pend.step(s, 0.7, -0.2), pend.step(s, 0.7, -0.2)
        np.testing.assert_array_equal(a.next_state.x, b.next_state.x)
        assert a.reward == b.reward and a.next_state.t == b.next_state.t == 1

    def test_non_finite_state_flags_fault(self, pend):
        res = pend.step(EnvState(np.array([np.nan, 0.0])), 0.0, 0.0)
        assert res.done and res.info["fault"]


class TestAdjudicate:
    def steps(self, pend):
        return pend.episode_steps

    def test_settles_upright(self, pend):
        angles = np.concatenate([np.linspace(3.0, 0.0, 200), np.zeros(self.steps(pend) - 200)])
        assert adjudicate(angles) == adjudicate(angles, pend)
        assert adjudicate(angles).win

    def test_reaches_then_falls(self, pend):
        angles = np.concatenate([np.zeros(100), np.full(self.steps(pend) - 100, 0.5)])
        r = adjudicate(angles)
        assert not r.win and r.failure_mode == 1

    def test_too_late(self, pend):
        angles = np.concatenate([np.full(self.steps(pend) - 50, 2.0), np.zeros(50)])
        r = adjudicate(angles)
        assert not r.win and r.failure_mode == 2

    def test_never_upright(self, pend):
        r = adjudicate(np.full(self.steps(pend), 1.0))
        assert not r.win and r.failure_mode == 3

    def test_wrapping(self, pend):
        assert adjudicate(np.full(self.steps(pend), 2 * np.pi)).win


class TestDoubleIntegrator:
    def test_free_motion(self, di):
        x = di.step(EnvState(np.array([0.0, 1.0])), 0.0, 0.0).next_state.x
        np.testing.assert_allclose(x, [0.1, 1.0])

    def test_initial_state_in_box(self, di):
        for s in range(20):
            x = di.reset(s).x
            assert np.all(x >= di.box_low) and np.all(x <= di.box_high)

    def test_margins(self, di, rng):
        xs = rng.uniform(di.box_low, di.box_high, (5000, 2))
        g, ell = np.asarray(di.g(xs)), np.asarray(di.ell(xs))
        assert np.all(np.abs(xs[g < 0, 0]) > di.pos_limit)
        inside = ell >= 0
        assert inside.any()
        assert np.all(np.abs(xs[inside, 0]) <= di.target_pos) and np.all(np.abs(xs[inside, 1]) <= di.target_vel)
        assert not np.any(inside & (g < 0))

    def test_margins_lipschitz(self, di, rng):
        a, b = rng.uniform(di.box_low, di.box_high, (2, 5000, 2))
        dist = np.linalg.norm(a - b, axis=1)
        for f in (di.g, di.ell):
            assert np.all(np.abs(np.asarray(f(a)) - np.asarray(f(b))) <= 1.0 * dist + 1e-12)

    def test_failure_terminates(self, di):
        res = di.step(EnvState(np.array([1.99, 1.0])), 1.0, 0.4)
        assert res.done and res.info["failure"] and res.reward < 0

    def test_trace_export(self, di, tmp_path):
        recs = rollout_trace(di, EnvState(np.array([0.0, 0.0])), [0.5] * 3, [0.0] * 3)
        write_trace(tmp_path / "t.jsonl", recs)
        lines = [json.loads(s) for s in (tmp_path / "t.jsonl").read_text().splitlines()]
        assert [r["t"] for r in lines] == [0, 1, 2] and set(lines[0]) == {"t", "x", "u", "d", "g"}


def test_make_env_overrides():
    assert make_env("pendulum", d_max=0.5).d_max == 0.5
    with pytest.raises(ValueError, match="unknown"):
        make_env("pendulum", nonsense=1)
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("cartpole")


def test_wrap_angle():
    np.testing.assert_allclose(wrap_angle(np.array([np.pi, -np.pi, 3 * np.pi / 2])), [np.pi, np.pi, -np.pi / 2])
