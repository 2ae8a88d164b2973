import numpy as np
import pytest

from errors import InvalidInput
from stats import (Accumulator, batch_means_se, chunk_ranges, fit_decay_rate, fit_exponent,
                   fit_exponent_replicated, map_chunks, map_ordered, mean_se)


def test_chunk_ranges_cover_replicas():
    ranges = chunk_ranges(2500, 1024)
    assert ranges == [(0, 1024), (1024, 1024), (2048, 452)]


def test_map_chunks_keeps_order():
    serial = map_chunks(lambda a, n: (a, n), 3000, workers=1)
    threaded = map_chunks(lambda a, n: (a, n), 3000, workers=4)
    assert serial == threaded
    assert map_ordered(lambda a, b: a * b, [(1, 2), (3, 4), (5, 6)], workers=2) == [2, 12, 30]


def test_accumulator_merge_matches_full_sample():
    x = np.random.default_rng(0).standard_normal((1000, 3))
    acc = Accumulator().add(x[:300])
    acc.add(x[300:700]).merge(Accumulator().add(x[700:]))
    assert acc.n == 1000
    assert np.allclose(acc.mean, x.mean(axis=0))
    assert np.allclose(acc.variance, x.var(axis=0, ddof=1))
    assert np.allclose(acc.std_error, x.std(axis=0, ddof=1) / np.sqrt(1000))


def test_mean_se():
    m, se = mean_se([1.0, 2.0, 3.0])
    assert m == pytest.approx(2.0)
    assert se == pytest.approx(1 / np.sqrt(3))
    assert mean_se([4.0]) == (4.0, 0.0)


def test_batch_means_se():
    series = np.random.default_rng(1).standard_normal(10_000)
    assert batch_means_se(series, 20) == pytest.approx(0.01, rel=0.5)
    with pytest.raises(InvalidInput, match="5 values is shorter than 10 batches"):
        batch_means_se(np.ones(5), 10)


def test_fit_exponent_on_exact_power_law():
    xs = np.array([1.0, 2.0, 4.0, 8.0])
    fit = fit_exponent(xs, 3 * xs ** -0.5)
    assert fit.exponent == pytest.approx(-0.5)
    assert fit.intercept == pytest.approx(np.log(3))
    dropped = fit_exponent(xs, [1.0, 0.0, -1.0, 2.0])
    assert dropped.points == 2


def test_replicated_fit_reports_seed_spread():
    xs = [1.0, 2.0, 4.0]
    fit = fit_exponent_replicated(xs, [np.array(xs) ** 1.1, np.array(xs) ** 0.9])
    assert fit.exponent == pytest.approx(1.0, abs=0.02)
    assert fit.per_seed == pytest.approx([1.1, 0.9])
    assert fit.std_error == pytest.approx(0.1)


def test_decay_rate():
    ts = np.array([0.5, 1.0, 2.0])
    fit = fit_decay_rate(ts, [2 * np.exp(-0.7 * ts)])
    assert fit.exponent == pytest.approx(0.7)
