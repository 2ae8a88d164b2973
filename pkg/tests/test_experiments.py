import numpy as np
import pandas as pd
import pytest

from errors import InvalidInput
from experiments import (ReferencePool, clt_analytic_w1, clt_beta, clt_rate,
                         contraction_analytic_w1, contraction_decay, lemma_suite,
                         reference_sample, ula_analytic_w1, ula_scaling)
from model import make_linear_model
from stats import fit_decay_rate, fit_exponent

STEPS = (0.2, 0.1, 0.05, 0.025)
N_GRID = (8, 16, 32, 64, 128)


def test_ula_analytic_distance_and_exponent():
    assert ula_analytic_w1(1.0, 0.1, 1) == pytest.approx(0.020728, abs=1e-5)
    fit = fit_exponent(STEPS, [ula_analytic_w1(1.0, s, 1) for s in STEPS])
    assert fit.exponent == pytest.approx(1.0, abs=0.05)


def test_clt_analytic_distance_and_exponent():
    assert clt_analytic_w1(1) == pytest.approx(0.53538, abs=1e-5)
    fit = fit_exponent(N_GRID, [clt_analytic_w1(n) for n in N_GRID])
    assert fit.exponent == pytest.approx(-0.5, abs=0.1)


def test_clt_beta():
    assert clt_beta("rademacher", 4) == pytest.approx(2.0)
    assert clt_beta("bounded_uniform", 1) == pytest.approx(np.sqrt(3.0))
    with pytest.raises(InvalidInput, match="beta"):
        clt_beta("gaussian", 1)


def test_contraction_analytic_law_decays_at_least_at_c():
    ts = (0.25, 0.5, 1.0, 1.5, 2.0)
    w = [contraction_analytic_w1(1.0, 2.0, t) for t in ts]
    assert fit_decay_rate(ts, [w]).exponent >= 0.5
    assert contraction_analytic_w1(1.0, 2.0, 20.0) == pytest.approx(0.0, abs=1e-6)


def test_reference_sample_is_exact_gaussian_for_linear():
    model, _ = make_linear_model(np.diag([1.0, 4.0]))
    sample = reference_sample(model, 4000, 1, 0, 0.01)
    target = np.array([1.0, 0.25])
    assert np.all(np.abs(sample.var(axis=0) - target) <= 3 * target * np.sqrt(2 / 3999))
    pool = ReferencePool(model, 100, 0.01)
    assert pool.get(3)[0] is pool.get(3)[0]
    assert not np.allclose(pool.get(3)[0], pool.get(3)[1])


def test_ula_scaling_small_run(ou):
    result = ula_scaling(ou, (0.2, 0.1), 500, 11, seeds=2, workers=1)
    frame = result.frame
    assert len(frame) == 4
    assert {"s", "seed", "raw", "baseline", "corrected", "analytic", "analytic_match",
            "term_delta3", "ula_total", "pair_total"} <= set(frame.columns)
    assert (frame.corrected >= 0).all()
    assert frame.loc[frame.s == 0.1, "analytic"].iloc[0] == pytest.approx(0.020728, abs=1e-5)
    summary = result.as_summary()
    assert summary["analytic_exponent"] == pytest.approx(1.0, abs=0.1)
    assert set(summary["bound_dominates"]) == {0.1, 0.2}
    assert set(summary["bound_rate_holds"]) == {0.1, 0.2}


def test_ula_scaling_constant_covers_the_whole_grid(ou):
    result = ula_scaling(ou, (0.2, 0.1, 0.05), 500, 15, seeds=2, workers=1)
    summary = result.summary
    ratios = summary["bound_ratio"]
    assert summary["constant_ula_bound"] == pytest.approx(max(ratios.values()))
    assert summary["all_dominated"]
    means = result.frame.groupby("s").corrected.mean()
    if means.max() > 0:
        assert summary["constant_ula_bound"] > 0


def test_ula_scaling_reports_the_analytic_match(ou):
    result = ula_scaling(ou, (0.2, 0.1), 500, 16, seeds=3, workers=1)
    frame, summary = result.frame, result.summary
    for s, group in frame.groupby("s"):
        se = group.baseline.std(ddof=1) / np.sqrt(len(group))
        expected = abs(group.corrected.mean() - group.analytic.iloc[0]) <= 3 * se
        assert summary["analytic_match"][s] == expected
        assert (group.analytic_match == expected).all()
    assert summary["all_analytic_match"] == all(summary["analytic_match"].values())


def test_ula_scaling_does_not_depend_on_workers(ou):
    one = ula_scaling(ou, (0.2, 0.1), 300, 12, seeds=2, workers=1).frame
    two = ula_scaling(ou, (0.2, 0.1), 300, 12, seeds=2, workers=3).frame
    pd.testing.assert_frame_equal(one, two)


def test_ula_scaling_rejects_empty_grid(ou):
    with pytest.raises(InvalidInput):
        ula_scaling(ou, (), 100)


def test_clt_rate_small_run():
    result = clt_rate("rademacher", 1, (8, 32), 500, 13, seeds=2, workers=1)
    frame = result.frame
    assert len(frame) == 4
    first = frame[frame.seed == 13]
    assert (first.term_r2 == 0.0).all()
    assert frame.analytic.notna().all()
    assert result.summary["beta"] == pytest.approx(1.0)
    with pytest.raises(InvalidInput):
        clt_rate("cauchy", 1, (8,), 100, seeds=1)


def test_contraction_small_run(ou):
    result = contraction_decay(ou, [2.0], (0.5, 1.0, 2.0), 1000, 14, seeds=2, dt=0.05)
    summary = result.summary
    assert summary["c"] == pytest.approx(0.5)
    assert summary["R1"] == pytest.approx(2.0)
    assert summary["analytic_rate"] >= 0.5
    assert summary["analytic_bound_holds"]
    assert {"ergodic_rhs", "ergodic_pass"} <= set(result.frame.columns)


def test_contraction_checks_dimension(ou):
    with pytest.raises(InvalidInput, match="dimension"):
        contraction_decay(ou, [1.0, 2.0], (1.0,), 100, seeds=1)


def test_lemma_suite_refuses_counterexample(counterexample):
    ledger = lemma_suite(counterexample, 1)
    assert ledger.refused
    assert not ledger.passed
    assert len(ledger.records) == 1
    assert ledger.records[0]["check"] == "assumption_probe"


def test_lemma_suite_records_every_check(ou):
    ledger = lemma_suite(ou, 3, paths=500, replicas=1000)
    records = {r["check"]: r for r in ledger.records}
    assert {"bismut_gradient_bound", "weight_product_rule", "seed_determinism",
            "step_refinement", "bismut_ibp", "flow_composition"} <= set(records)
    assert records["seed_determinism"]["pass"]
    assert records["step_refinement"]["pass"]
    assert records["weight_product_rule"]["pass"]
    bound = records["bismut_gradient_bound"]
    assert bound["pass"]
    assert bound["rhs"] <= bound["rhs_unit"] * np.exp(-2.0) * (1 + 1e-3)


@pytest.mark.slow
def test_lemma_suite_power_model(power2):
    ledger = lemma_suite(power2, 2)
    assert not ledger.refused
    records = {r["check"]: r for r in ledger.records}
    assert records["variation_bound"]["pass"]
    assert records["variation_bound"]["fraction_pass"] == 1.0
    assert records["second_moment_bound"]["pass"]
    assert records["flow_composition"]["pass"]
    for name in ("bismut_gradient_bound", "weight_product_rule", "seed_determinism",
                 "step_refinement"):
        assert records[name]["pass"], name


@pytest.mark.slow
def test_ula_scaling_acceptance(ou):
    result = ula_scaling(ou, STEPS)
    assert result.summary["all_dominated"]
    assert result.summary["analytic_exponent"] == pytest.approx(1.0, abs=0.05)


@pytest.mark.slow
def test_clt_rate_acceptance():
    result = clt_rate("rademacher", 1, N_GRID)
    assert result.fit.exponent == pytest.approx(-0.5, abs=0.1)


@pytest.mark.slow
def test_contraction_acceptance(ou):
    result = contraction_decay(ou, [2.0])
    assert result.summary["rate_at_least_c"]
    assert result.summary["ergodic_bound_holds"]
