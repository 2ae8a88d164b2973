import numpy as np
import pytest

from errors import DivergenceError, InvalidInput
from paths import (BrownianPath, TimeGrid, propagator, refinement_check, refinement_error,
                   second_moment_bound, seed_determinism_check, simulate_flows,
                   simulate_malliavin, simulate_state, variation_bound_check,
                   verify_dv_equals_variation, verify_flow_composition)


def test_time_grid():
    grid = TimeGrid.from_dt(1.0, 0.1)
    assert grid.steps == 10
    assert grid.dt == pytest.approx(0.1)
    assert grid.index(0.3) == 3
    with pytest.raises(InvalidInput, match="not a node"):
        grid.index(0.333)
    with pytest.raises(InvalidInput):
        TimeGrid(0.0, 5)


def test_noise_is_reproducible_and_streams_differ():
    grid = TimeGrid(1.0, 16)
    a = BrownianPath(3, grid, 2, 50).increments
    b = BrownianPath(3, grid, 2, 50).increments
    c = BrownianPath(3, grid, 2, 50, stream=1).increments
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_chunks_match_the_full_batch():
    grid = TimeGrid(1.0, 8)
    full = BrownianPath(7, grid, 2, 3000)
    part = full.chunk(1500, 100)
    assert np.array_equal(full.increments[1500:1600], part.increments)


def test_refinement_keeps_the_coarse_path():
    coarse = BrownianPath(11, TimeGrid(1.0, 8), 1, 40).increments
    fine = BrownianPath(11, TimeGrid(1.0, 16), 1, 40).increments
    assert np.allclose(fine[:, 0::2] + fine[:, 1::2], coarse, atol=1e-12)


def test_increment_variance():
    grid = TimeGrid(1.0, 10)
    inc = BrownianPath(5, grid, 1, 4096).increments
    assert abs(inc.var() - 0.1) <= 3 * 0.1 * np.sqrt(2 / inc.size)


def test_euler_state_recursion(ou):
    grid = TimeGrid(1.0, 20)
    noise = BrownianPath(1, grid, 1, 5)
    X = simulate_state(ou, [0.5], grid, noise)
    x = np.full((5, 1), 0.5)
    for k in range(20):
        x = (1 - grid.dt) * x + np.sqrt(2) * noise.increments[:, k]
    assert np.allclose(X[:, -1], x)


def test_linear_variation_is_deterministic(ou):
    grid = TimeGrid.from_dt(1.0, 1e-2)
    bundle = simulate_flows(ou, [1.0], grid, BrownianPath(2, grid, 1, 4), [1.0], [1.0],
                            second=True, malliavin=True)
    assert np.allclose(bundle.var1[:, -1, 0], np.exp(-1.0), rtol=1e-4)
    assert np.allclose(bundle.var11_22, 0.0)
    assert np.allclose(bundle.malliavin, 0.0)


def test_variation_bound_holds_on_every_path(power2):
    grid = TimeGrid.from_dt(2.0, 1e-2)
    noise = BrownianPath(4, grid, 2, 500)
    bundle = simulate_flows(power2, [1.0, 1.0], grid, noise, [1.0, 0.0])
    check = variation_bound_check(bundle, power2.theta)
    assert check["pass"]
    assert check["fraction_pass"] == 1.0


def test_dv_equals_variation(power2):
    grid = TimeGrid.from_dt(1.0, 1e-2)
    check = verify_dv_equals_variation(power2, [0.5, -0.5], grid,
                                       BrownianPath(9, grid, 2, 200), [1.0, 0.0])
    assert check.passed


def test_flow_composition(power2):
    grid = TimeGrid.from_dt(1.0, 1e-2)
    X = simulate_state(power2, [1.0, 0.0], grid, BrownianPath(6, grid, 2, 50))
    assert verify_flow_composition(power2, X, grid, 50) <= 5 * grid.dt
    J = propagator(power2, X, grid, 0, 0 + 1)
    assert J.shape == (50, 2, 2)


def test_divergence_reports_the_step(counterexample):
    grid = TimeGrid.from_dt(1.0, 0.1)
    with pytest.raises(DivergenceError) as err:
        simulate_state(counterexample, [100.0], grid, BrownianPath(0, grid, 1, 3))
    assert err.value.step >= 1


def test_flow_arguments_are_checked(ou):
    grid = TimeGrid.from_dt(1.0, 0.1)
    noise = BrownianPath(0, grid, 1, 3)
    with pytest.raises(InvalidInput, match="u2"):
        simulate_flows(ou, [0.0], grid, noise, [1.0], second=True)
    X = simulate_state(ou, [0.0], grid, noise)
    with pytest.raises(InvalidInput, match="horizon"):
        simulate_malliavin(ou, X, X, X, grid, 0.5)
    with pytest.raises(InvalidInput, match="dimension"):
        simulate_state(ou, [0.0, 1.0], grid, noise)


def test_second_moment_bound(ou):
    grid = TimeGrid.from_dt(2.0, 1e-2)
    X = simulate_state(ou, [2.0], grid, BrownianPath(8, grid, 1, 4000))
    sq = X[:, -1, 0] ** 2
    bound = second_moment_bound(ou, ou.theta, [2.0], 2.0)
    assert sq.mean() <= bound + 3 * sq.std() / np.sqrt(sq.size)


def test_halving_the_step_is_first_order(power2):
    check = refinement_check(power2, [1.0, 1.0], seed=31)
    assert check["pass"]
    assert check["order"] == pytest.approx(1.0, abs=0.25)
    assert check["rms"][0] > check["rms"][1] > check["rms"][2] > 0


def test_refinement_error_on_ou(ou):
    # the gap is (1 - dt)^m against (1 - dt/2)^{2m} on x0 plus O(dt) changes in the noise weights
    grid = TimeGrid(1.0, 50)
    err = refinement_error(ou, [1.0], grid, BrownianPath(32, grid, 1, 2000))
    assert 0.0 < err < grid.dt


def test_same_seed_gives_identical_flows(power2):
    grid = TimeGrid.from_dt(0.5, 1e-2)
    check = seed_determinism_check(power2, [0.5, -0.5], grid, 33, [1.0, 0.0], [0.0, 1.0], 50)
    assert check["pass"]
    assert all(check["arrays"].values())
