import csv

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from magics_lab.envs import DoubleIntegrator
from magics_lab.safety import (GridDynamics, OracleMonitor, SafetySpec, ValueGrid, default_axes, filtered_rollouts,
                               interior_starts, interpolate, isaacs_backup, load_value_grid, predicted_value,
                               reach_avoid_set, safety_filter, save_value_grid, set_agreement, solve_isaacs,
                               write_set_snapshot)

ENV = DoubleIntegrator()
RES = (81, 81)


@pytest.fixture(scope="module")
def dyn():
    return GridDynamics(ENV, default_axes(ENV, RES))


@pytest.fixture(scope="module")
def oracle(dyn):
    return solve_isaacs(ENV, gamma=0.99, dynamics=dyn)


@pytest.fixture(scope="module")
def long_horizon(dyn):
    """Closer to the undiscounted set; the filter rollouts run for 200 steps."""
    return solve_isaacs(ENV, gamma=0.999, dynamics=dyn)


def test_converges_and_residuals_contract(oracle):
    d = oracle.diagnostics
    assert d["converged"]
    r = np.asarray(d["residuals"])
    nz = r[:-1] > 1e-12
    assert np.all(r[1:][nz] <= 0.99 * r[:-1][nz] + 1e-12)


def test_backup_is_a_gamma_contraction(dyn, rng):
    spec = SafetySpec(ENV.margins, 0.9)
    a = ValueGrid(dyn.axes, rng.standard_normal(dyn.shape), dyn.u_levels, dyn.d_levels)
    b = ValueGrid(dyn.axes, rng.standard_normal(dyn.shape), dyn.u_levels, dyn.d_levels)
    gap = np.abs(isaacs_backup(a, spec, dyn).values - isaacs_backup(b, spec, dyn).values).max()
    assert gap <= 0.9 * np.abs(a.values - b.values).max() + 1e-12


def test_gamma_zero_gives_the_margin(dyn):
    grid = solve_isaacs(ENV, gamma=0.0, dynamics=dyn)
    np.testing.assert_allclose(grid.values.ravel(), dyn.g, atol=0)


def test_value_never_exceeds_margin(oracle, dyn):
    assert np.all(oracle.values.ravel() <= dyn.g + 1e-12)
    assert np.all(dyn.g[reach_avoid_set(oracle).ravel()] >= 0)


def test_point_symmetry(oracle):
    np.testing.assert_allclose(oracle.values, oracle.values[::-1, ::-1], atol=1e-9)


@pytest.mark.parametrize("x, safe", [((0.0, 0.0), True), ((-1.0, 0.5), True), ((1.9, 2.9), False),
                                     ((1.5, 2.5), False), ((-1.9, -2.9), False)])
def test_known_states(oracle, x, safe):
    assert bool(reach_avoid_set(oracle, np.array([x]))[0]) == safe


def test_grid_file_round_trip(oracle, tmp_path):
    path = save_value_grid(tmp_path / "v.bin", oracle)
    back = load_value_grid(path)
    np.testing.assert_array_equal(back.values, oracle.values)
    assert back.axes == oracle.axes and back.gamma == 0.99 and back.variant == "avoid_only"
    assert path.with_suffix(".json").exists()
    (tmp_path / "bad.bin").write_bytes(b"junk" * 10)
    with pytest.raises(ValueError):
        load_value_grid(tmp_path / "bad.bin")


def test_agreement_with_itself_is_one(oracle):
    assert set_agreement(oracle, lambda s: interpolate(oracle, s)) == 1.0
    assert set_agreement(oracle, lambda s: -jnp.ones(len(s))) == pytest.approx(1 - np.mean(oracle.values >= 0))


def test_interpolation_reproduces_nodes(oracle):
    s = oracle.states()[::97]
    np.testing.assert_allclose(interpolate(oracle, s), oracle.values.ravel()[::97], atol=1e-12)


class TestFilter:
    def test_passes_safe_actions(self, oracle):
        dec = safety_filter(ENV, np.zeros(2), 0.3, OracleMonitor(oracle, ENV))
        assert not dec.intervened
        np.testing.assert_allclose(dec.chosen_action, [0.3])

    def test_overrides_near_the_wall(self, oracle):
        dec = safety_filter(ENV, np.array([1.2, 1.5]), 1.0, OracleMonitor(oracle, ENV))
        assert dec.intervened and dec.chosen_action[0] < 1.0

    def test_worst_case_prediction_is_pessimistic(self, oracle, rng):
        mon = OracleMonitor(oracle, ENV)
        for x in rng.uniform([-1.5, -2], [1.5, 2], (20, 2)):
            nominal = predicted_value(ENV, mon, jnp.asarray(x), 0.2, "nominal")
            worst = predicted_value(ENV, mon, jnp.asarray(x), 0.2, "worst_case")
            assert float(worst) <= float(nominal) + 1e-12

    def test_unknown_prediction(self, oracle):
        with pytest.raises(ValueError):
            predicted_value(ENV, OracleMonitor(oracle, ENV), jnp.zeros(2), 0.0, "optimistic")

    def test_reckless_task_policy_is_kept_safe(self, long_horizon):
        x0 = interior_starts(long_horizon, 300, seed=1)
        failed, iv, _ = filtered_rollouts(long_horizon, ENV, x0, lambda x, k: jnp.ones(1), steps=200,
                                          threshold=long_horizon.lipschitz_margin, prediction="worst_case")
        assert not failed.any() and iv.sum() > 0

    def test_nominal_prediction_is_not_enough(self, long_horizon):
        x0 = interior_starts(long_horizon, 300, seed=1)
        failed, _, _ = filtered_rollouts(long_horizon, ENV, x0, lambda x, k: jnp.ones(1), steps=200,
                                         threshold=0.0, prediction="nominal")
        assert failed.mean() > 0.5

    def test_unfiltered_reckless_policy_fails(self, oracle):
        x0 = interior_starts(oracle, 100, seed=1)
        failed, iv, _ = filtered_rollouts(oracle, ENV, x0, lambda x, k: jnp.ones(1), steps=200,
                                          threshold=-np.inf, prediction="worst_case")
        assert failed.mean() > 0.5 and iv.sum() == 0


def test_interior_starts_clear_the_margin(oracle):
    x = interior_starts(oracle, 50, margin=0.1, seed=0)
    assert np.all(np.asarray(interpolate(oracle, x)) >= 0.1 - 1e-12)
    with pytest.raises(ValueError):
        interior_starts(oracle, 5, margin=100.0)


def test_snapshot_csv(tmp_path):
    write_set_snapshot(tmp_path / "s.csv", np.array([[0.0, 1.0], [1.0, 2.0]]), np.array([0.5, -0.1]))
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["inside"] for r in rows] == ["1", "0"] and rows[1]["vel"] == "2.000000"


def test_spec_validation():
    with pytest.raises(ValueError):
        SafetySpec(ENV.margins, gamma=1.0)
    with pytest.raises(ValueError):
        SafetySpec(ENV.margins, variant="reach")
