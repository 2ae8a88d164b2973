"""
stats.py - Replica chunking, order-fixed reductions and fitting helpers.
All Monte Carlo loops in the lab go through map_chunks so that results only
depend on (seed, NOISE_BLOCK), never on the worker count.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, TypeVar

import numpy as np
from scipy import stats as sps

from config import NOISE_BLOCK, WORKERS
from errors import InvalidInput

log = logging.getLogger(__name__)

T = TypeVar("T")


def chunk_ranges(replicas: int, block: int = NOISE_BLOCK) -> list[tuple[int, int]]:
    """Split [0, replicas) into block-aligned (start, count) ranges."""
    return [(a, min(block, replicas - a)) for a in range(0, replicas, block)]


def map_chunks(fn: Callable[[int, int], T], replicas: int,
               workers: int | None = None) -> list[T]:
    """Run fn(start, count) over every chunk; results come back in chunk order."""
    ranges = chunk_ranges(replicas)
    workers = WORKERS if workers is None else workers
    if workers <= 1 or len(ranges) == 1:
        out = []
        for i, (a, n) in enumerate(ranges):
            log.debug(f"chunk {i + 1}/{len(ranges)} ({n} replicas)")
            out.append(fn(a, n))
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, a, n) for a, n in ranges]
        return [f.result() for f in futures]


def map_ordered(fn: Callable[..., T], items: list, workers: int | None = None) -> list[T]:
    """fn(*item) for every item, results in item order."""
    workers = WORKERS if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(*item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *item) for item in items]
        return [f.result() for f in futures]


@dataclass
class Accumulator:
    """Streaming mean/variance over the leading (replica) axis, Chan's merge."""
    n: int = 0
    mean: np.ndarray | float = 0.0
    m2: np.ndarray | float = 0.0

    def add(self, values) -> "Accumulator":
        values = np.asarray(values, dtype=float)
        if values.shape[0] == 0:
            return self
        nb = values.shape[0]
        mb = values.mean(axis=0)
        m2b = ((values - mb) ** 2).sum(axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return self
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * nb / n
        self.m2 = self.m2 + m2b + delta ** 2 * self.n * nb / n
        self.n = n
        return self

    def merge(self, other: "Accumulator") -> "Accumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean, other.m2
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = self.mean + delta * other.n / n
        self.m2 = self.m2 + other.m2 + delta ** 2 * self.n * other.n / n
        self.n = n
        return self

    @property
    def variance(self):
        return self.m2 / max(self.n - 1, 1)

    @property
    def std_error(self):
        return np.sqrt(self.variance / max(self.n, 1))


def mean_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if n < 2:
        return float(values.mean()) if n else 0.0, 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n))


def batch_means_se(series: np.ndarray, n_batches: int) -> float:
    """SE of a (possibly autocorrelated) series mean via non-overlapping batch means."""
    series = np.asarray(series, dtype=float).ravel()
    size = len(series) // n_batches
    if size < 1:
        raise InvalidInput(f"series of {len(series)} values is shorter than {n_batches} batches")
    means = series[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


@dataclass
class ExponentFit:
    exponent: float
    std_error: float
    intercept: float
    points: int = 0
    per_seed: list[float] = field(default_factory=list)


def fit_exponent(xs, ys) -> ExponentFit:
    """Least-squares slope of log y against log x. Nonpositive y are dropped."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = (xs > 0) & (ys > 0) & np.isfinite(ys)
    if keep.sum() < 2:
        return ExponentFit(float("nan"), float("nan"), float("nan"), int(keep.sum()))
    lx, ly = np.log(xs[keep]), np.log(ys[keep])
    if keep.sum() == 2:
        slope = (ly[1] - ly[0]) / (lx[1] - lx[0])
        return ExponentFit(float(slope), float("nan"), float(ly[0] - slope * lx[0]), 2)
    res = sps.linregress(lx, ly)
    return ExponentFit(float(res.slope), float(res.stderr), float(res.intercept), int(keep.sum()))


def fit_exponent_replicated(xs, ys_by_seed: list) -> ExponentFit:
    """Fit on the seed-averaged curve; SE from the spread of per-seed slopes."""
    ys_by_seed = [np.asarray(y, dtype=float) for y in ys_by_seed]
    fit = fit_exponent(xs, np.mean(ys_by_seed, axis=0))
    slopes = [fit_exponent(xs, y).exponent for y in ys_by_seed]
    slopes = [s for s in slopes if np.isfinite(s)]
    fit.per_seed = slopes
    if len(slopes) >= 2:
        fit.std_error = float(np.std(slopes, ddof=1) / np.sqrt(len(slopes)))
    return fit


def fit_decay_rate(ts, ys_by_seed: list) -> ExponentFit:
    """Rate r of y ~ e^{-r t}: minus the slope of log y against t, fitted on
    the seed-averaged curve with the per-seed spread as SE."""
    ts = np.asarray(ts, dtype=float)
    ys_by_seed = [np.asarray(y, dtype=float) for y in ys_by_seed]

    def one(ys):
        keep = (ys > 0) & np.isfinite(ys)
        if keep.sum() < 2:
            return None
        return sps.linregress(ts[keep], np.log(ys[keep]))

    res = one(np.mean(ys_by_seed, axis=0))
    if res is None:
        return ExponentFit(float("nan"), float("nan"), float("nan"))
    fit = ExponentFit(float(-res.slope), float(res.stderr), float(res.intercept), len(ts))
    rates = [float(-r.slope) for r in map(one, ys_by_seed) if r is not None]
    fit.per_seed = rates
    if len(rates) >= 2:
        fit.std_error = float(np.std(rates, ddof=1) / np.sqrt(len(rates)))
    return fit
