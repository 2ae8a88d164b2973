from itertools import product

import numpy as np
import pytest

from errors import InvalidInput
from experiments import clt_sample, reference_sample
from model import make_linear_model
from pair import (PairBatch, bound_terms, broken_pair, clt_conditional_moments, clt_pair,
                  delta3_log, exchangeability_check, regress_conditional_structure,
                  ula_bound_terms, ula_chain, ula_pair)
from stats import fit_exponent


def test_delta3_log_values():
    vals = delta3_log(np.array([0.0, 1.0, np.e, 0.1]))
    assert vals[0] == 0.0
    assert vals[1] == pytest.approx(1.0)
    assert vals[2] == pytest.approx(np.e ** 3)
    assert vals[3] == pytest.approx(1e-3 * np.log(10))


def test_zero_displacement_gives_zero_bound():
    w = np.random.default_rng(0).standard_normal((50, 2))
    report = bound_terms(PairBatch(w, w.copy(), 1.0, "still"))
    assert report.total == 0.0


def test_unit_displacement():
    report = bound_terms(PairBatch(np.zeros((1, 1)), np.ones((1, 1)), 1.0, "unit"))
    assert report.term_delta3 == pytest.approx(1.0)
    assert report.as_row()["total"] == pytest.approx(1.0)


def test_empty_batch_rejected():
    with pytest.raises(InvalidInput):
        bound_terms(PairBatch(np.zeros((0, 1)), np.zeros((0, 1)), 1.0, "empty"))


@pytest.mark.parametrize("n,d", [(3, 1), (2, 2)])
def test_clt_conditional_moments_by_enumeration(n, d):
    support = np.array(list(product([-1.0, 1.0], repeat=d)))
    probs = np.full(len(support), 1.0 / len(support))
    for flat in product([-1.0, 1.0], repeat=n * d):
        X = np.array(flat).reshape(n, d)
        m = clt_conditional_moments(X, support, probs)
        assert np.allclose(m["mean"], m["expected_mean"])
        assert np.allclose(m["second"], m["expected_second"])


def test_clt_pair_rademacher_has_no_r2():
    X = clt_sample("rademacher", (500, 16, 1), 1, 0)
    Xp = clt_sample("rademacher", (500, 16, 1), 1, 1)
    batch = clt_pair(X, Xp, 1)
    assert batch.lam == pytest.approx(1 / 16)
    assert np.allclose(batch.r2_matrices(), 0.0)
    assert bound_terms(batch).term_r2 == 0.0
    assert np.allclose(batch.w, X.sum(axis=1) / 4.0)


def test_clt_pair_input_checks():
    X = np.ones((200, 4, 1))
    with pytest.raises(InvalidInput, match="centered"):
        clt_pair(X, X)
    with pytest.raises(InvalidInput, match="shapes"):
        clt_pair(np.zeros((2, 4, 1)), np.zeros((2, 3, 1)))


def test_ula_pair_rank_one_r2(ou):
    w = np.random.default_rng(2).standard_normal((100, 1))
    batch = ula_pair(ou, 0.1, w, 2)
    g = -w
    assert np.allclose(batch.r2_matrices()[:, 0, 0], 0.05 * g[:, 0] ** 2)
    assert bound_terms(batch).term_r2 == pytest.approx(np.mean(0.05 * g[:, 0] ** 2))
    assert batch.r1 is None


@pytest.mark.parametrize("s", [0.5, 1 / np.e, 0.0])
def test_step_must_stay_below_one_over_e(ou, s):
    with pytest.raises(InvalidInput, match="1/e"):
        ula_pair(ou, s, np.zeros((3, 1)))


def test_ula_pair_conforms(ou):
    sample = ula_chain(ou, 0.1, 4000, 3)
    batch = ula_pair(ou, 0.1, sample, 3)
    assert exchangeability_check(batch, z_max=4.0)["pass"]
    diag = regress_conditional_structure(batch, ou)
    assert diag.lambda_ok
    assert diag.as_dict()["check"] == "conditional_structure"


def test_broken_pair_is_flagged(ou):
    sample = reference_sample(ou, 4000, 4, 0, 0.01)
    batch = broken_pair(sample, 0.1, 4)
    assert exchangeability_check(batch)["pass"]
    diag = regress_conditional_structure(batch, ou)
    assert not diag.conforms
    assert diag.lambda_hat == pytest.approx(1.0, abs=0.1)


def test_regression_needs_enough_samples(ou):
    batch = ula_pair(ou, 0.1, np.zeros((10, 1)))
    with pytest.raises(InvalidInput, match="1000"):
        regress_conditional_structure(batch, ou)


def test_ula_chain_stationary_variance(ou):
    sample = ula_chain(ou, 0.2, 4000, 5)
    assert abs(sample.var() - 1 / 0.9) <= 3 * (1 / 0.9) * np.sqrt(2 / (sample.size - 1))


def test_ula_bound_terms(ou):
    sample = ula_chain(ou, 0.1, 1000, 6)
    terms = ula_bound_terms(ou, sample, 0.1, 6)
    assert set(terms) == {"gauss", "drift3", "drift2", "tilde", "total"}
    parts = terms["gauss"] + terms["drift3"] + terms["drift2"] + terms["tilde"]
    assert terms["total"] == pytest.approx(parts)
    assert terms["gauss"] == pytest.approx(np.sqrt(0.1) * np.log(10) * 2 * np.sqrt(2 / np.pi))


def test_ula_pair_conditional_moments():
    # delta = s g(W) + sqrt(2s) Z: E[delta - s g] = 0 and E[delta delta^T - 2s I - s^2 g g^T] = 0
    ou2, _ = make_linear_model(np.eye(2))
    s = 0.1
    sample = ula_chain(ou2, s, 4000, 7)
    batch = ula_pair(ou2, s, sample, 7)
    delta, g = batch.delta, ou2.drift(batch.w)
    first = delta - s * g
    assert np.all(np.abs(first.mean(axis=0)) <= 3 * first.std(axis=0, ddof=1) / np.sqrt(batch.size))
    second = (delta[:, :, None] * delta[:, None, :] - 2 * s * np.eye(2)
              - s ** 2 * g[:, :, None] * g[:, None, :]).reshape(batch.size, 4)
    se = second.std(axis=0, ddof=1) / np.sqrt(batch.size)
    assert np.all(np.abs(second.mean(axis=0)) <= 3 * se)


def test_delta3_term_scales_as_root_s(ou):
    steps = (0.2, 0.1, 0.05, 0.025)
    terms = []
    for k, s in enumerate(steps):
        sample = ula_chain(ou, s, 4000, 8, stream=k)
        terms.append(bound_terms(ula_pair(ou, s, sample, 8, stream=k)).term_delta3)
    fit = fit_exponent(steps, terms)
    assert fit.exponent == pytest.approx(0.5, abs=0.1)
