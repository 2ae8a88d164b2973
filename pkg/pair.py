"""
pair.py - Exchangeable pairs (W, W') and the three bound terms
    (1/lambda) E[|delta|^3 (|log|delta|| v 1)] + E|R1| + sqrt(d) E||R2||_HS
with delta = W' - W, E[delta|W] = lambda (g(W) + R1), E[delta delta^T|W] = 2 lambda (I + R2).

Pairs: one ULA step from stationarity, and the resampling pair of a
normalized sum. A broken pair (independent W') is kept as a negative control.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from config import BURN_IN_FACTOR, DEFAULT_SEED, GEWEKE_Z
from errors import InvalidInput, NonStationary
from model import DriftModel
from stats import mean_se
from transport import gaussian_abs_moment

log = logging.getLogger(__name__)

Array = np.ndarray
MAX_STEP = 1.0 / np.e


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass
class PairBatch:
    w: Array
    w_prime: Array
    lam: float
    kind: str
    r1: Array | None = None                      # None: analytic zero
    r2_factors: list = field(default_factory=list)
    r2_full: Array | None = None
    r1_mode: str = "analytic"
    r2_mode: str = "analytic_rank1"
    params: dict = field(default_factory=dict)

    @property
    def delta(self) -> Array:
        return self.w_prime - self.w

    @property
    def size(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    def r2_matrices(self) -> Array:
        """R2 per sample, (n, d, d): the stored matrix or the sum of rank-1 factors."""
        if self.r2_full is not None:
            return self.r2_full
        out = np.zeros((self.size, self.dim, self.dim))
        for a, b in self.r2_factors:
            out += a[:, :, None] * b[:, None, :]
        return out


@dataclass
class BoundReport:
    term_delta3: float
    term_r1: float
    term_r2: float
    ses: dict
    kind: str = ""
    params: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.term_delta3 + self.term_r1 + self.term_r2

    def as_row(self) -> dict:
        row = {"pair_kind": self.kind, **{f"param_{k}": v for k, v in self.params.items()},
               "term_delta3": self.term_delta3, "term_r1": self.term_r1,
               "term_r2": self.term_r2, "total": self.total}
        row.update({f"se_{k}": v for k, v in self.ses.items()})
        return row


# ── ULA chain and pair ───────────────────────────────────────────────────────
def _check_step(s: float) -> None:
    if not 0 < s < MAX_STEP:
        raise InvalidInput(f"step must satisfy 0 < s < 1/e ({MAX_STEP:.4f}), got {s}")


def ula_chain(model: DriftModel, s: float, n_samples: int, seed: int = DEFAULT_SEED,
              stream: int = 0) -> Array:
    """n_samples independent ULA chains run for BURN_IN_FACTOR/(theta0 s) steps;
    the final states are draws from mu_s. A mean-split check on |Y|^2 between
    half burn-in and the end guards stationarity."""
    _check_step(s)
    theta = model.require_theta()
    burn = int(np.ceil(BURN_IN_FACTOR / (theta.theta0 * s)))
    rng = _rng(seed, 11, stream)
    y = np.zeros((n_samples, model.dim))
    scale = np.sqrt(2 * s)
    half = None
    for k in range(burn):
        y = y + s * model.drift(y) + scale * rng.standard_normal(y.shape)
        if k == burn // 2:
            half = np.sum(y * y, axis=1)
    if not np.all(np.isfinite(y)):
        raise NonStationary(f"ULA chain diverged at s={s}")
    end = np.sum(y * y, axis=1)
    m_half, se_half = mean_se(half)
    m_end, se_end = mean_se(end)
    z = (m_end - m_half) / max(np.hypot(se_half, se_end), 1e-300)
    if abs(z) > GEWEKE_Z:
        raise NonStationary(f"ULA chain at s={s} not stationary after {burn} steps (z={z:.2f})")
    log.debug(f"ULA s={s}: {burn} burn-in steps, mean-split z={z:.2f}")
    return y


def ula_pair(model: DriftModel, s: float, chain_samples: Array, seed: int = DEFAULT_SEED,
             stream: int = 0) -> PairBatch:
    _check_step(s)
    w = np.asarray(chain_samples, dtype=float)
    z = _rng(seed, 12, stream).standard_normal(w.shape)
    g = model.drift(w)
    w_prime = w + s * g + np.sqrt(2 * s) * z
    return PairBatch(w, w_prime, s, "ula", r2_factors=[(g, 0.5 * s * g)],
                     params={"s": s})


def broken_pair(samples: Array, lam: float, seed: int = DEFAULT_SEED) -> PairBatch:
    """W' an independent draw of the same law: exchangeable, wrong structure."""
    w = np.asarray(samples, dtype=float)
    perm = _rng(seed, 13).permutation(w.shape[0])
    return PairBatch(w, w[perm], lam, "broken", params={"lambda": lam})


# ── Resampling pair for normalized sums ─────────────────────────────────────
def clt_pair(X: Array, X_prime: Array, seed: int = DEFAULT_SEED) -> PairBatch:
    """X, X_prime: (B, n, d) or (n, d). W = sum X / sqrt(n); W' swaps X_I for X'_I."""
    X = np.asarray(X, dtype=float)
    X_prime = np.asarray(X_prime, dtype=float)
    if X.ndim == 2:
        X, X_prime = X[None], X_prime[None]
    if X.shape != X_prime.shape or X.ndim != 3:
        raise InvalidInput(f"sample shapes differ or are not (B, n, d): {X.shape} vs {X_prime.shape}")
    B, n, d = X.shape
    flat = X.reshape(-1, d)
    if flat.shape[0] >= 100:
        m, se = flat.mean(axis=0), flat.std(axis=0, ddof=1) / np.sqrt(flat.shape[0])
        if np.any(np.abs(m) > 4 * se + 1e-12):
            raise InvalidInput(f"samples are not centered: mean {m} (se {se})")
    I = _rng(seed, 14).integers(0, n, size=B)
    rows = np.arange(B)
    w = X.sum(axis=1) / np.sqrt(n)
    w_prime = w + (X_prime[rows, I] - X[rows, I]) / np.sqrt(n)
    second = np.einsum("bni,bnj->bij", X, X) / n
    r2 = 0.5 * (second - np.eye(d))
    return PairBatch(w, w_prime, 1.0 / n, "clt", r2_full=r2, r2_mode="analytic_full",
                     params={"n": n, "d": d})


def clt_conditional_moments(X: Array, support: Array, probs: Array) -> dict:
    """Exhaustive E[delta|X] and E[delta delta^T|X] over the index I and the
    replacement value, against -W/n and 2 lambda (I + R2)."""
    X = np.asarray(X, dtype=float)
    support = np.asarray(support, dtype=float).reshape(len(probs), -1)
    probs = np.asarray(probs, dtype=float)
    n, d = X.shape
    mean = np.zeros(d)
    second = np.zeros((d, d))
    for i in range(n):
        for v, p in zip(support, probs):
            delta = (v - X[i]) / np.sqrt(n)
            mean += p * delta / n
            second += p * np.outer(delta, delta) / n
    w = X.sum(axis=0) / np.sqrt(n)
    r2 = 0.5 * (X.T @ X / n - np.eye(d))
    return {"mean": mean, "second": second, "expected_mean": -w / n,
            "expected_second": 2.0 / n * (np.eye(d) + r2)}


# ── Bound terms ──────────────────────────────────────────────────────────────
def delta3_log(norms: Array) -> Array:
    """|delta|^3 (|log|delta|| v 1), extended by 0 at delta = 0."""
    norms = np.asarray(norms, dtype=float)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, norms ** 3 * np.maximum(np.abs(np.log(safe)), 1.0), 0.0)


def bound_terms(batch: PairBatch, d: int | None = None) -> BoundReport:
    if batch.size == 0:
        raise InvalidInput("empty pair batch")
    d = d or batch.dim
    t1 = delta3_log(np.linalg.norm(batch.delta, axis=1)) / batch.lam
    t2 = np.zeros(batch.size) if batch.r1 is None else np.linalg.norm(batch.r1, axis=1)
    if batch.r2_full is not None:
        t3 = np.sqrt(d) * np.linalg.norm(batch.r2_full, axis=(1, 2))
    else:
        t3 = np.zeros(batch.size)
        for a, b in batch.r2_factors:
            t3 += np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    (m1, s1), (m2, s2), (m3, s3) = mean_se(t1), mean_se(t2), mean_se(t3)
    return BoundReport(m1, m2, m3, {"term_delta3": s1, "term_r1": s2, "term_r2": s3},
                       batch.kind, dict(batch.params))


def ula_bound_terms(model: DriftModel, samples: Array, s: float,
                      seed: int = DEFAULT_SEED) -> dict:
    """The four ULA bound terms, without the constant:
    sqrt(s){|log s| E|Z|^3 + s^{3/2}|log s| E|g|^3 + s^{1/2} E|g|^2 + E[|dt|^3 |log|dt||]}
    with dt = sqrt(s) g(W) + sqrt(2) Z."""
    _check_step(s)
    w = np.asarray(samples, dtype=float)
    g = np.linalg.norm(model.drift(w), axis=1)
    z = _rng(seed, 15).standard_normal(w.shape)
    tilde = np.linalg.norm(np.sqrt(s) * model.drift(w) + np.sqrt(2) * z, axis=1)
    safe = np.where(tilde > 0, tilde, 1.0)
    ls = abs(np.log(s))
    terms = {
        "gauss": ls * gaussian_abs_moment(w.shape[1], 3.0),
        "drift3": s ** 1.5 * ls * float(np.mean(g ** 3)),
        "drift2": np.sqrt(s) * float(np.mean(g ** 2)),
        "tilde": float(np.mean(np.where(tilde > 0, tilde ** 3 * np.abs(np.log(safe)), 0.0))),
    }
    terms = {k: np.sqrt(s) * v for k, v in terms.items()}
    terms["total"] = float(sum(terms.values()))
    return terms


# ── Diagnostics ──────────────────────────────────────────────────────────────
def exchangeability_check(batch: PairBatch, z_max: float = 3.0) -> dict:
    """E[phi(W) - phi(W')] for phi in {x, x^2, x^3}, componentwise."""
    zs = {}
    for power in (1, 2, 3):
        diff = batch.w ** power - batch.w_prime ** power
        m = diff.mean(axis=0)
        se = diff.std(axis=0, ddof=1) / np.sqrt(batch.size)
        zs[f"x{power}"] = (m / np.where(se > 0, se, 1.0)).tolist()
    worst = max(abs(v) for vals in zs.values() for v in vals)
    return {"check": "exchangeability", "z": zs, "worst_z": float(worst), "pass": worst <= z_max}


@dataclass
class ConditionalDiagnostics:
    lambda_hat: float
    lambda_se: float
    lambda_declared: float
    r1_chi2: float
    r1_dof: int
    r1_pvalue: float
    r1_bins: Array
    r2_bins: Array

    @property
    def lambda_ok(self) -> bool:
        return abs(self.lambda_hat - self.lambda_declared) <= 3 * self.lambda_se + 1e-12

    @property
    def r1_ok(self) -> bool:
        return self.r1_pvalue > 1e-3

    @property
    def conforms(self) -> bool:
        return self.lambda_ok and self.r1_ok

    def as_dict(self) -> dict:
        return {"check": "conditional_structure", "lambda_hat": self.lambda_hat,
                "lambda_se": self.lambda_se, "lambda_declared": self.lambda_declared,
                "r1_chi2": self.r1_chi2, "r1_dof": self.r1_dof, "r1_pvalue": self.r1_pvalue,
                "r2_residual_max": float(np.nanmax(np.abs(self.r2_bins))) if self.r2_bins.size else 0.0,
                "pass": self.conforms}


def regress_conditional_structure(batch: PairBatch, model: DriftModel) -> ConditionalDiagnostics:
    """lambda-hat by least squares through the origin of delta on g(W), then
    binned residual fields R1-hat = E[delta|W]/lambda - g and
    R2-hat = E[delta delta^T|W]/(2 lambda) - I - R2, tested against zero."""
    if batch.size < 1000:
        raise InvalidInput(f"regression needs at least 1000 samples, got {batch.size}")
    if batch.dim > 2:
        raise InvalidInput(f"binned regression supports d <= 2, got {batch.dim}")
    delta, g = batch.delta, model.drift(batch.w)
    gg = float(np.sum(g * g))
    lam_hat = float(np.sum(delta * g)) / gg
    resid = delta - lam_hat * g
    lam_se = float(np.sqrt(np.sum(np.sum(resid * g, axis=1) ** 2))) / gg

    lam = batch.lam
    n, d = batch.size, batch.dim
    bins = int(np.ceil(n ** (1.0 / 3.0)))
    labels = np.zeros(n, dtype=int)
    for j in range(d):
        edges = np.quantile(batch.w[:, j], np.linspace(0, 1, bins + 1)[1:-1])
        labels = labels * bins + np.searchsorted(edges, batch.w[:, j])
    r1_field = delta / lam - g
    if batch.r1 is not None:
        r1_field = r1_field - batch.r1
    outer = delta[:, :, None] * delta[:, None, :] / (2 * lam) - np.eye(d) - batch.r2_matrices()
    chi2, dof, r1_bins, r2_bins = 0.0, 0, [], []
    for b in np.unique(labels):
        sel = labels == b
        if sel.sum() < 10:
            continue
        vals = r1_field[sel]
        m = vals.mean(axis=0)
        se = vals.std(axis=0, ddof=1) / np.sqrt(sel.sum())
        ok = se > 0
        chi2 += float(np.sum((m[ok] / se[ok]) ** 2))
        dof += int(ok.sum())
        r1_bins.append(m)
        r2_bins.append(outer[sel].mean(axis=0))
    pvalue = float(sps.chi2.sf(chi2, dof)) if dof else 1.0
    diag = ConditionalDiagnostics(lam_hat, lam_se, lam, chi2, dof, pvalue,
                                  np.array(r1_bins), np.array(r2_bins))
    if not diag.conforms:
        log.warning(f"pair '{batch.kind}' does not conform: lambda-hat {lam_hat:.4g} "
                    f"vs declared {lam:.4g}, R1 p-value {pvalue:.3g}")
    return diag
