import numpy as np
import pytest

from bismut import (running_weight, verify_bel, verify_ibp, verify_second_order,
                    verify_weight_product_rule, weight_first, weight_gradient, weight_moments,
                    weight_set)
from errors import InvalidInput
from model import make_linear_model
from paths import BrownianPath, TimeGrid, simulate_flows
from stats import fit_exponent
from stein import coordinate_square_h, linear_h, sine_h

MOMENT_TIMES = (1 / 64, 1 / 32, 1 / 16, 1 / 8, 1 / 4)


def _bundle(model, x0, u1, u2, replicas=200, t=1.0, dt=1e-2, seed=0):
    grid = TimeGrid.from_dt(t, dt)
    noise = BrownianPath(seed, grid, model.dim, replicas)
    return simulate_flows(model, x0, grid, noise, u1, u2, second=True, malliavin=True)


def test_second_weight_identity(power2):
    b = _bundle(power2, [0.5, 0.5], [1.0, 0.0], [0.0, 1.0])
    ws = weight_set(b, 1.0)
    assert np.allclose(ws.i_u1_u2, ws.i_u1 * ws.i_u2 - ws.dv2_i_u1)


def test_running_weight_matches_terminal_weight(power2):
    b = _bundle(power2, [0.5, 0.5], [1.0, 0.0], [0.0, 1.0])
    running = running_weight(b.var1, b.increments, b.grid.times)
    assert np.allclose(running[:, -1], weight_first(b, 1.0))
    assert np.allclose(running[:, 0], 0.0)


def test_gradient_weight_vanishes_for_linear_drift(ou):
    b = _bundle(ou, [1.0], [1.0], [1.0])
    assert np.allclose(weight_gradient(b, 1.0), 0.0)


def test_weight_horizon_floor(ou):
    b = _bundle(ou, [1.0], [1.0], [1.0])
    with pytest.raises(InvalidInput, match="floor"):
        weight_first(b, 0.02)
    with pytest.raises(InvalidInput):
        weight_first(b, 0.0)


def test_linear_ibp_mean_weight(ou):
    # E[X_t I_u(t)] = d/dx E[X_t] = e^{-t} for the OU process; on the Euler grid
    # the left-point sum gives (1/t) sum_k (1 - dt)^{m-1-k} var1_k dt exactly
    b = _bundle(ou, [1.0], [1.0], [1.0], replicas=8000, seed=3)
    vals = b.state[:, -1, 0] * weight_first(b, 1.0)
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    m, dt = b.grid.steps, b.grid.dt
    discrete = float(np.sum((1 - dt) ** (m - 1 - np.arange(m)) * b.var1[0, :-1, 0]) * dt)
    assert discrete == pytest.approx(np.exp(-1.0), abs=2 * dt)
    assert abs(vals.mean() - discrete) <= 3 * se


OU_WEIGHT_VAR = (1 - np.exp(-2.0)) / 4


@pytest.fixture(scope="module")
def ou_weights():
    model, _ = make_linear_model(np.eye(1))
    b = _bundle(model, [1.0], [1.0], [1.0], replicas=10_000, seed=21)
    # var1 is deterministic for linear drift: Itô isometry of the left-point sum
    isometry = float(np.sum(b.var1[0, :-1, 0] ** 2) * b.grid.dt / 2)
    return b, weight_set(b, 1.0), isometry


def test_first_weight_variance_on_ou(ou_weights):
    b, ws, isometry = ou_weights
    n = ws.i_u1.size
    assert isometry == pytest.approx(OU_WEIGHT_VAR, abs=3e-3)
    var = ws.i_u1.var(ddof=1)
    assert abs(var - isometry) <= 3 * isometry * np.sqrt(2 / (n - 1))
    assert abs(ws.i_u1.mean()) <= 3 * ws.i_u1.std(ddof=1) / np.sqrt(n)


def test_malliavin_weight_is_deterministic_on_ou(ou_weights, ou):
    b, ws, _ = ou_weights
    assert np.allclose(b.malliavin, 0.0)
    assert np.allclose(ws.dv2_i_u1, ws.dv2_i_u1[0], rtol=0, atol=1e-14)
    assert ws.dv2_i_u1[0] == pytest.approx(OU_WEIGHT_VAR, abs=1e-3)
    zero = _bundle(ou, [1.0], [0.0], [1.0], replicas=50, seed=21)
    assert np.allclose(weight_set(zero, 1.0).dv2_i_u1, 0.0)


def test_second_weight_has_mean_zero_on_ou(ou_weights):
    b, ws, isometry = ou_weights
    vals = ws.i_u1_u2
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    # E[I_u^2] - D_V I_u on the grid: left-point sum against trapezoid, O(dt) apart
    offset = isometry - ws.dv2_i_u1[0]
    assert abs(offset) <= b.grid.dt
    assert abs(vals.mean() - offset) <= 3 * se


def test_verify_ibp_linear_functional_in_two_dimensions():
    ou2, _ = make_linear_model(np.eye(2))
    h = linear_h([1.0, 0.0])
    check = verify_ibp(ou2, [1.0, 0.0], 1.0, h, [1.0, 0.0], 20_000, dt=2e-3, seed=22)
    assert check.lhs == pytest.approx(np.exp(-1.0), abs=1e-4)
    assert check.passed
    across = verify_ibp(ou2, [1.0, 0.0], 1.0, h, [0.0, 1.0], 20_000, dt=2e-3, seed=22)
    assert across.lhs == pytest.approx(0.0, abs=1e-12)
    assert across.passed


def test_verify_ibp_square(ou):
    check = verify_ibp(ou, [0.5], 1.0, coordinate_square_h(0), [1.0], 20_000, dt=2e-3, seed=23)
    assert check.passed


def test_verify_bel_linear(ou):
    check = verify_bel(ou, [0.3], 1.0, linear_h([1.0]), [1.0], 20_000, dt=2e-3, seed=24)
    # the central difference of a linear functional is the Euler factor (1 - dt)^m
    assert check.lhs == pytest.approx(np.exp(-1.0), abs=1e-3)
    assert check.fd_se == pytest.approx(0.0, abs=1e-12)
    assert abs(check.rhs - np.exp(-1.0)) <= 3 * check.bismut_se
    assert check.passed


def test_verify_second_order_square(ou):
    check = verify_second_order(ou, [0.3], 1.0, coordinate_square_h(0), [1.0], [1.0], 20_000,
                                dt=5e-3, seed=25)
    assert check.passed


def test_weight_product_rule(ou, power2):
    check = verify_weight_product_rule(power2, [0.5, -0.5], 1.0, sine_h([1.0, 0.0]),
                                       [1.0, 0.0], [0.0, 1.0], 2000, seed=26)
    assert check.passed
    assert check.tolerance > 0
    assert check.as_dict()["check"] == "weight_product_rule"
    assert verify_weight_product_rule(ou, [0.3], 1.0, sine_h([1.0]), [1.0], [1.0], 2000,
                                      seed=27).passed
    with pytest.raises(InvalidInput, match="fd_eps"):
        verify_weight_product_rule(ou, [0.3], 1.0, sine_h([1.0]), [1.0], [1.0], 100, fd_eps=1.0)


def test_verify_ibp(ou, power2):
    assert verify_ibp(ou, [0.3], 1.0, sine_h([1.0]), [1.0], 4000, seed=1).passed
    check = verify_ibp(power2, [0.5, -0.5], 1.0, sine_h([1.0, 0.0]), [1.0, 0.0], 4000, seed=2)
    assert check.passed
    assert check.as_dict()["check"] == "bismut_ibp"


def test_verify_ibp_needs_replicas(ou):
    with pytest.raises(InvalidInput, match="1000"):
        verify_ibp(ou, [0.0], 1.0, linear_h([1.0]), [1.0], 10)


def test_verify_bel(ou):
    check = verify_bel(ou, [0.3], 1.0, sine_h([1.0]), [1.0], 4000, seed=5)
    assert check.passed
    assert check.fd_se > 0 and check.bismut_se > 0
    with pytest.raises(InvalidInput, match="fd_eps"):
        verify_bel(ou, [0.3], 1.0, sine_h([1.0]), [1.0], 1000, fd_eps=0.1)


def test_verify_second_order(ou):
    check = verify_second_order(ou, [0.3], 1.0, sine_h([1.0]), [1.0], [1.0], 8000, seed=6)
    assert check.passed


def test_weight_moment_exponents(ou):
    moments = [weight_moments(ou, [1.0], t, [1.0], [1.0], 4000, seed=7, stream=k)
               for k, t in enumerate(MOMENT_TIMES)]
    targets = {"abs_i_u": -0.5, "abs_dv_i_u": -1.0, "abs_i_uu": -1.0}
    for key, target in targets.items():
        fit = fit_exponent(MOMENT_TIMES, [m[key] for m in moments])
        assert abs(fit.exponent - target) <= 0.15, key
