"""
transport.py - Wasserstein-1 distances.

Exact empirical W1 (assignment or network simplex), the dual lower bound from
a dictionary of 1-Lipschitz probes, and closed forms used as oracles:
isotropic centered Gaussians, 1-d Gaussians, 1-d quantile quadrature and a
finite 1-d law against a normal law.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import ot
from scipy import integrate
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import gammaln
from scipy.stats import norm

from config import OT_SUPPORT_CAP
from errors import InvalidInput

log = logging.getLogger(__name__)

COST_QUANTUM = 1e-12
WEIGHT_TOL = 1e-12


@dataclass
class EmpiricalMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float)
        if pts.shape[0] != w.shape[0] or pts.shape[0] == 0:
            raise InvalidInput(f"{pts.shape[0]} points with {w.shape[0]} weights")
        if np.any(w <= 0):
            raise InvalidInput("weights must be > 0")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise InvalidInput(f"weights sum to {w.sum():.15g}, not 1")
        self.points = pts
        self.weights = w

    @classmethod
    def uniform(cls, points) -> "EmpiricalMeasure":
        pts = np.asarray(points, dtype=float)
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def mean(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.weights, fn(self.points)))


# ── Exact empirical W1 ───────────────────────────────────────────────────────
def w1_exact(P: EmpiricalMeasure, Q: EmpiricalMeasure) -> float:
    """Exact W1. Equal-size uniform measures go to the assignment solver with
    at most OT_SUPPORT_CAP points per side; any other pair goes to the
    network simplex, whose combined support must stay within OT_SUPPORT_CAP."""
    if P.dim != Q.dim:
        raise InvalidInput(f"dimension mismatch: {P.dim} vs {Q.dim}")
    assignment = P.size == Q.size and P.is_uniform and Q.is_uniform
    if assignment and P.size > OT_SUPPORT_CAP:
        raise InvalidInput(f"support of {P.size} points per side exceeds cap {OT_SUPPORT_CAP}")
    if not assignment and P.size + Q.size > OT_SUPPORT_CAP:
        raise InvalidInput(f"combined support of {P.size + Q.size} points exceeds cap {OT_SUPPORT_CAP}")
    cost = cdist(P.points, Q.points)
    if assignment:
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())

    a = P.weights / P.weights.sum()
    b = Q.weights / Q.weights.sum()
    top = cost.max()
    if top == 0:
        return 0.0
    quantized = np.rint(cost / (top * COST_QUANTUM))
    plan = ot.emd(a, b, quantized, numItermax=10_000_000)
    return float(np.sum(plan * cost))


def w1_samples(x, y) -> float:
    """Exact W1 between the uniform empirical measures of two samples."""
    return w1_exact(EmpiricalMeasure.uniform(x), EmpiricalMeasure.uniform(y))


def w1_sorted_1d(x, y) -> float:
    """Equal-size 1-d samples: mean |sorted(x) - sorted(y)|."""
    x = np.sort(np.asarray(x, dtype=float).ravel())
    y = np.sort(np.asarray(y, dtype=float).ravel())
    if x.shape != y.shape:
        raise InvalidInput(f"sorted coupling needs equal sizes, got {x.size} and {y.size}")
    return float(np.mean(np.abs(x - y)))


def _check_lipschitz(name: str, probe, points: np.ndarray, max_points: int = 500) -> None:
    pts = points[:: max(1, points.shape[0] // max_points)]
    vals = np.asarray(probe(pts), dtype=float)
    gaps = np.abs(vals[:, None] - vals[None, :])
    dists = cdist(pts, pts)
    if np.any(gaps > dists * (1 + 1e-9) + 1e-12):
        raise InvalidInput(f"probe '{name}' is not 1-Lipschitz on the sample points")


def w1_lip_lower_bound(P: EmpiricalMeasure, Q: EmpiricalMeasure,
                       probes: dict[str, Callable[[np.ndarray], np.ndarray]]) -> float:
    both = np.vstack([P.points, Q.points])
    best = 0.0
    for name, probe in probes.items():
        _check_lipschitz(name, probe, both)
        best = max(best, abs(P.mean(probe) - Q.mean(probe)))
    return best


# ── Closed forms ─────────────────────────────────────────────────────────────
def gaussian_abs_moment(d: int, p: float = 1.0) -> float:
    """E|Z|^p for Z ~ N(0, I_d)."""
    return float(np.exp(p / 2 * np.log(2) + gammaln((d + p) / 2) - gammaln(d / 2)))


def w1_gaussian_isotropic(sigma1: float, sigma2: float, d: int) -> float:
    if sigma1 <= 0 or sigma2 <= 0:
        raise InvalidInput(f"scales must be > 0, got {sigma1}, {sigma2}")
    return abs(sigma1 - sigma2) * gaussian_abs_moment(d)


def w1_gaussian_1d(m1: float, s1: float, m2: float, s2: float) -> float:
    """Monotone coupling: E|(m1 - m2) + (s1 - s2) Z|, a folded-normal mean."""
    a, b = m1 - m2, abs(s1 - s2)
    if b == 0:
        return abs(a)
    return float(b * np.sqrt(2 / np.pi) * np.exp(-a * a / (2 * b * b)) + a * (1 - 2 * norm.cdf(-a / b)))


def w1_quantile_1d(ppf1: Callable[[float], float], ppf2: Callable[[float], float]) -> float:
    """int_0^1 |F1^{-1}(p) - F2^{-1}(p)| dp by adaptive quadrature."""
    value, err = integrate.quad(lambda p: abs(ppf1(p) - ppf2(p)), 0.0, 1.0, limit=400)
    log.debug(f"quantile W1 {value:.8f} (quadrature error {err:.1e})")
    return float(value)


def _int_cdf(x: float) -> float:
    # antiderivative of Phi vanishing at -inf
    return x * norm.cdf(x) + norm.pdf(x)


def w1_discrete_vs_normal(support, probs, loc: float = 0.0, scale: float = 1.0) -> float:
    """Exact int |F - Phi| for a finite 1-d law against N(loc, scale^2)."""
    x = (np.asarray(support, dtype=float).ravel() - loc) / scale
    p = np.asarray(probs, dtype=float).ravel()
    if x.shape != p.shape or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
        raise InvalidInput("support and probabilities must match and sum to 1")
    order = np.argsort(x)
    x, p = x[order], p[order]
    keep = p > 0
    x, p = x[keep], p[keep]
    levels = np.cumsum(p)
    total = _int_cdf(x[0]) + _int_cdf(-x[-1])
    for a, b, c in zip(x[:-1], x[1:], levels[:-1]):
        if b <= a:
            continue
        m = float(np.clip(norm.ppf(c), a, b))
        total += c * (m - a) - (_int_cdf(m) - _int_cdf(a))
        total += (_int_cdf(b) - _int_cdf(m)) - c * (b - m)
    return float(scale * total)
