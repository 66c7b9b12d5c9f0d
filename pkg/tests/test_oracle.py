import numpy as np
import pytest

from safefql import boat, oracle


@pytest.fixture(scope="module")
def grid():
    return oracle.value_iteration()


@pytest.fixture(scope="module")
def max_grid():
    return oracle.value_iteration(backup="max")


def test_action_set_is_boundary_plus_zero():
    a = oracle.disk_actions(16)
    assert a.shape == (17, 2)
    np.testing.assert_allclose(np.linalg.norm(a[:16], axis=1), 1.0)
    np.testing.assert_array_equal(a[16], [0.0, 0.0])


def test_obstacle_cells_are_positive(grid, max_grid):
    nodes = np.stack(np.meshgrid(grid.x1, grid.x2, indexing="ij"), axis=-1).reshape(-1, 2)
    ell = boat.safety_margin(nodes)
    for g in (grid, max_grid):
        v = g.values.ravel()
        assert np.all(v[ell > 0] >= ell[ell > 0] - 1e-12)
        assert np.all(v[ell > 0] > 0)


def test_value_is_at_least_the_margin(max_grid):
    nodes = np.stack(np.meshgrid(max_grid.x1, max_grid.x2, indexing="ij"), axis=-1).reshape(-1, 2)
    assert np.all(max_grid.values.ravel() >= boat.safety_margin(nodes) - 1e-12)


def test_discounted_value_never_below_the_margin(grid):
    nodes = np.stack(np.meshgrid(grid.x1, grid.x2, indexing="ij"), axis=-1).reshape(-1, 2)
    assert np.all(grid.values.ravel() >= boat.safety_margin(nodes) - 1e-12)


def test_myopic_limit():
    g = oracle.value_iteration(resolution=(50, 50), gamma=0.0, backup="discounted")
    nodes = np.stack(np.meshgrid(g.x1, g.x2, indexing="ij"), axis=-1).reshape(-1, 2)
    np.testing.assert_array_equal(g.values.ravel(), boat.safety_margin(nodes))
    # the max form keeps max(l, 0 * next), which clips safe cells to zero
    g = oracle.value_iteration(resolution=(50, 50), gamma=0.0, backup="max")
    np.testing.assert_array_equal(g.values.ravel(), np.maximum(boat.safety_margin(nodes), 0.0))


def test_open_water_is_feasible(grid, max_grid):
    for g in (grid, max_grid):
        assert g.interpolate([1.5, 0.0])[0] < 0
        assert g.interpolate([1.9, 0.0])[0] < 0
    assert oracle.oracle_sign(grid, np.array([1.9, 0.0])) == oracle.FEASIBLE


def test_obstacle_centre_is_infeasible(grid):
    assert oracle.oracle_sign(grid, np.array([-0.5, 0.5])) == oracle.INFEASIBLE
    assert oracle.oracle_sign(grid, np.array([-1.0, -1.2])) == oracle.INFEASIBLE


def test_dead_band_excludes_small_values(grid):
    x = boat.sample_states(np.random.default_rng(0), 5000)
    v = grid.interpolate(x)
    signs = oracle.oracle_sign(grid, x, band=0.1)
    np.testing.assert_array_equal(signs == oracle.EXCLUDED, np.abs(v) <= 0.1)


def test_residuals_are_non_increasing(grid, max_grid):
    for g in (grid, max_grid):
        r = g.residuals
        assert r[-1] < g.tol
        assert np.all(np.diff(r) <= 1e-12)
        assert g.iterations == len(r)


def test_refinement_changes_feasible_area_little(grid):
    fine = oracle.value_iteration(resolution=(200, 200))
    assert abs(fine.feasible_fraction() - grid.feasible_fraction()) < 0.02


def test_non_convergence_is_reported():
    with pytest.raises(oracle.ConvergenceError):
        oracle.value_iteration(resolution=(50, 50), max_iter=3)


@pytest.mark.parametrize("kwargs", [dict(resolution=(1, 50)), dict(backup="min")])
def test_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        oracle.value_iteration(**kwargs)


def test_oracle_q_is_one_backup(grid):
    rng = np.random.default_rng(1)
    x, a = boat.sample_states(rng, 50), boat.sample_disk_action(rng, 50)
    nxt = grid.interpolate(boat.dynamics_step(x, a, grid.dt))
    ell = boat.safety_margin(x)
    np.testing.assert_allclose(oracle.oracle_q(grid, x, a),
                               0.01 * ell + 0.99 * np.maximum(ell, nxt), atol=1e-12)
    # the best discretised action reproduces the grid value at the nodes
    node = np.array([[grid.x1[70], grid.x2[40]]])
    q = oracle.oracle_q(grid, np.repeat(node, 17, axis=0), grid.actions)
    assert q.min() == pytest.approx(grid.values[70, 40], abs=1e-5)


def test_sign_agreement_counts(grid):
    x = np.array([[-0.5, 0.5], [1.5, 0.0], [-0.1, 0.5]])
    learned = np.array([0.2, 0.3, -5.0])
    out = oracle.sign_agreement(grid, x, learned)
    v = grid.interpolate(x)
    kept = np.abs(v) > 0.1
    assert out["compared"] == int(kept.sum())
    assert out["agree"] == int(np.sum(((learned >= 0) == (v > 0))[kept]))


def test_grid_dump_round_trip(tmp_path, grid):
    path = tmp_path / "grid.sfqg"
    oracle.save_grid(grid, path)
    x1, x2, vals = oracle.load_grid_values(path)
    np.testing.assert_allclose(x1, grid.x1)
    np.testing.assert_allclose(x2, grid.x2)
    np.testing.assert_allclose(vals, grid.values, rtol=1e-6, atol=1e-7)
    rows = path.with_suffix(".csv").read_text().splitlines()
    assert rows[0] == "x1,x2,value,l" and len(rows) == 1 + grid.values.size


def test_grid_dump_rejects_foreign_files(tmp_path):
    path = tmp_path / "bad.sfqg"
    path.write_bytes(b"XXXX" + bytes(100))
    with pytest.raises(ValueError):
        oracle.load_grid_values(path)
