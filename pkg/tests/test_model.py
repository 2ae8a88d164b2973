import numpy as np
import pytest

from errors import AssumptionViolation, InvalidInput
from model import (ThetaParams, contraction_constants, default_probes, make_linear_model,
                   make_power_model, probe_assumption, require_assumption)


def test_linear_theta_from_spectrum():
    model, theta = make_linear_model(np.diag([2.0, 5.0]))
    assert theta.theta0 == pytest.approx(2.0)
    assert theta.theta4 == pytest.approx(5.0)
    assert theta.theta1 == 0.0
    assert model.describe()["model.A"] == "2.0,0.0;0.0,5.0"


def test_linear_rejects_bad_matrices():
    with pytest.raises(InvalidInput, match="symmetric"):
        make_linear_model([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(InvalidInput, match="positive definite"):
        make_linear_model([[1.0, 0.0], [0.0, -1.0]])


def test_theta_rejects_nonpositive_theta0():
    with pytest.raises(InvalidInput, match="theta0"):
        ThetaParams(0.0, 1.0, 1.0, 1.0, 1.0)


@pytest.mark.parametrize("p", [0.0, 1.5, 2.0, 3.0])
def test_power_actions_match_finite_differences(p):
    model, _ = make_power_model(1.0, p, 3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 3))
    u1 = rng.standard_normal((20, 3))
    u2 = rng.standard_normal((20, 3))
    eps = 1e-6
    fd_jac = (model.drift(x + eps * u1) - model.drift(x - eps * u1)) / (2 * eps)
    assert np.allclose(model.jacobian_action(x, u1), fd_jac, rtol=1e-5, atol=1e-6)
    fd_hess = (model.jacobian_action(x + eps * u2, u1)
               - model.jacobian_action(x - eps * u2, u1)) / (2 * eps)
    assert np.allclose(model.hessian_action(x, u1, u2), fd_hess, rtol=1e-5, atol=1e-6)


def test_probe_passes_for_linear_and_power(ou, power2):
    for model in (ou, power2):
        report = probe_assumption(model, model.theta, default_probes(model.dim))
        assert report.passed
        assert report.as_dict()["passed"]


def test_counterexample_fails_the_probe(counterexample):
    report = probe_assumption(counterexample, counterexample.theta, default_probes(1))
    assert not report.passed
    with pytest.raises(AssumptionViolation):
        require_assumption(counterexample)


def test_probe_rejects_empty_list(ou):
    with pytest.raises(InvalidInput):
        probe_assumption(ou, ou.theta, [])


def test_analytic_contraction_constants(ou):
    cc = contraction_constants(ou)
    assert cc.R0 == 0.0
    assert cc.R1 == pytest.approx(2.0)
    assert cc.c == pytest.approx(0.5)
    assert cc.kappa(3.0) == pytest.approx(2.0)

    model, _ = make_linear_model(np.diag([2.0, 3.0]))
    cc = contraction_constants(model)
    assert cc.R1 == pytest.approx(np.sqrt(2.0))
    assert cc.c == pytest.approx(1.0)


def test_probed_constants_agree_with_analytic_on_linear(ou):
    cc = contraction_constants(ou, "probed")
    assert np.allclose(cc.kappa_values, 2.0)
    assert cc.R1 == pytest.approx(2.0, rel=1e-6)
    assert cc.c == pytest.approx(0.5, rel=1e-6)
    assert cc.as_dict()["kappa_is_upper_bound"]


def test_probed_constants_for_power_model(power2):
    cc = contraction_constants(power2, "probed")
    assert np.all(cc.kappa_values > 0)
    assert np.isfinite(cc.R1) and cc.c > 0


def test_analytic_mode_needs_linear(power2):
    with pytest.raises(InvalidInput):
        contraction_constants(power2, "analytic")
