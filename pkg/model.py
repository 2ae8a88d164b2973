"""
model.py - Drift models for the Langevin SDE dX = g(X)dt + sqrt(2)dB.
Each model carries its drift g, the Jacobian action grad_u g and the Hessian
action grad_{u2} grad_{u1} g, all vectorized over leading axes (..., d).
Also: numerical probes of the dissipativity assumption and the reflection
coupling contraction constants.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from config import KAPPA_PAIRS, KAPPA_RADII, PROBE_POINTS, PROBE_RADIUS, PROBE_TOL
from errors import AssumptionViolation, InvalidInput

log = logging.getLogger(__name__)

Array = np.ndarray


def _dot(a: Array, b: Array) -> Array:
    return np.sum(a * b, axis=-1, keepdims=True)


def _norm(a: Array) -> Array:
    return np.sqrt(np.sum(a * a, axis=-1))


# ── Types ────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class ThetaParams:
    theta0: float
    theta1: float
    theta2: float
    theta3: float
    theta4: float

    def __post_init__(self):
        if not self.theta0 > 0:
            raise InvalidInput(f"theta0 must be > 0, got {self.theta0}")
        for name in ("theta1", "theta2", "theta3"):
            if getattr(self, name) < 0:
                raise InvalidInput(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.theta4 > 0:
            raise InvalidInput(f"theta4 must be > 0, got {self.theta4}")

    def as_dict(self) -> dict:
        return {f"theta.{k}": getattr(self, k)
                for k in ("theta0", "theta1", "theta2", "theta3", "theta4")}


@dataclass(frozen=True, eq=False)
class DriftModel:
    dim: int
    drift: Callable[[Array], Array]
    jacobian_action: Callable[[Array, Array], Array]
    hessian_action: Callable[[Array, Array, Array], Array]
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    theta: ThetaParams | None = None

    def describe(self) -> dict:
        """Flat key/value description for config files and report headers."""
        out = {"model.kind": self.kind, "model.d": self.dim}
        for k, v in self.params.items():
            if k == "A":
                out["model.A"] = ";".join(",".join(repr(float(a)) for a in row) for row in v)
            elif k != "certificate":
                out[f"model.{k}"] = v
        if self.theta is not None:
            out.update(self.theta.as_dict())
        return out

    def require_theta(self) -> ThetaParams:
        if self.theta is None:
            raise InvalidInput(f"model '{self.kind}' has no declared theta parameters")
        return self.theta


@dataclass(frozen=True)
class ContractionConstants:
    R0: float
    R1: float
    c: float
    kappa: Callable[[float], float]
    mode: str = "analytic"
    radii: Array | None = None
    kappa_values: Array | None = None

    def as_dict(self) -> dict:
        out = {"R0": self.R0, "R1": self.R1, "c": self.c, "mode": self.mode}
        if self.mode == "analytic":
            out["kappa"] = float(self.kappa(1.0))
        else:
            out["kappa_min"] = float(np.min(self.kappa_values))
            out["kappa_is_upper_bound"] = True
        return out


# ── Constructors ─────────────────────────────────────────────────────────────
def make_linear_model(A) -> tuple[DriftModel, ThetaParams]:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise InvalidInput(f"A must be square, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12):
        raise InvalidInput("A must be symmetric")
    eig = np.linalg.eigvalsh(A)
    if eig[0] <= 0:
        raise InvalidInput(f"A must be positive definite, smallest eigenvalue {eig[0]:.3g}")
    theta = ThetaParams(float(eig[0]), 0.0, 1.0, 1.0, float(eig[-1]))

    def drift(x):
        return -x @ A.T

    def jac(x, u):
        return -np.broadcast_to(u, np.broadcast_shapes(np.shape(x), np.shape(u))) @ A.T

    def hess(x, u1, u2):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u1), np.shape(u2)))

    model = DriftModel(A.shape[0], drift, jac, hess, "linear", {"A": A}, theta)
    return model, theta


def _power_actions(c: float, p: float, shift: float):
    """Actions of g(x) = -c (shift + |x|^2)^{p/2} x; shift=1 is the power model,
    shift=0 the counterexample."""

    def base(x, q):
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        s = shift + r2
        if shift > 0:
            return s ** q
        safe = np.where(s > 0, s, 1.0)
        return np.where(s > 0, safe ** q, 0.0)

    def drift(x):
        return -c * base(x, p / 2) * x

    def jac(x, u):
        return -c * base(x, p / 2) * u - c * p * base(x, p / 2 - 1) * _dot(x, u) * x

    def hess(x, u1, u2):
        xu1, xu2, u12 = _dot(x, u1), _dot(x, u2), _dot(u1, u2)
        first = base(x, p / 2 - 1) * (xu1 * u2 + xu2 * u1 + u12 * x)
        second = (p - 2) * base(x, p / 2 - 2) * xu1 * xu2 * x
        return -c * p * (first + second)

    return drift, jac, hess


def make_power_model(c: float, p: float, d: int) -> tuple[DriftModel, ThetaParams]:
    if not c > 0:
        raise InvalidInput(f"power model needs c > 0, got {c}")
    if p < 0:
        raise InvalidInput(f"power model needs p >= 0, got {p}")
    if int(d) < 1:
        raise InvalidInput(f"dimension must be >= 1, got {d}")
    drift, jac, hess = _power_actions(float(c), float(p), 1.0)
    theta, certificate = _certify_power_theta(float(c), float(p))
    params = {"c": float(c), "p": float(p), "certificate": certificate}
    model = DriftModel(int(d), drift, jac, hess, "power", params, theta)
    return model, theta


def make_counterexample_model(c: float, p: float, d: int,
                              theta0: float = 0.01) -> tuple[DriftModel, ThetaParams]:
    """g(x) = -c|x|^p x: superlinear dissipation but flat at the origin."""
    if not c > 0 or not p > 0:
        raise InvalidInput(f"counterexample needs c > 0 and p > 0, got c={c}, p={p}")
    drift, jac, hess = _power_actions(float(c), float(p), 0.0)
    theta = ThetaParams(theta0, 1.0, float(p), float(c * p * (p + 1)), float(c))
    model = DriftModel(int(d), drift, jac, hess, "counterexample",
                       {"c": float(c), "p": float(p)}, theta)
    return model, theta


def _certify_power_theta(c: float, p: float) -> tuple[ThetaParams, dict]:
    radii = np.concatenate([[0.0], np.geomspace(1e-6, PROBE_RADIUS, 4000)])
    r = radii[1:]
    if p == 0:
        theta1 = 0.0
    elif p >= 2:
        # (1 + a)^q >= 1 + a^q for q >= 1
        theta1 = 1.0
    else:
        theta1 = float(np.min(((1 + r ** 2) ** (p / 2) - 1) / r ** p))
    theta2 = p
    envelope = (c * p * (1 + radii ** 2) ** (p / 2 - 1) * 3 * radii
                + c * p * abs(p - 2) * (1 + radii ** 2) ** (p / 2 - 2) * radii ** 3)
    theta3 = float(np.max(envelope / (1 + theta1 * radii) ** (theta2 - 1))) * 1.01
    growth = c * (1 + radii ** 2) ** (p / 2) * radii / (1 + radii ** (1 + p))
    theta4 = float(np.max(growth)) * 1.01
    theta = ThetaParams(c, theta1, theta2, theta3, theta4)
    certificate = {"radius": PROBE_RADIUS, "grid": len(radii), "theta1": theta1,
                   "theta3": theta3, "theta4": theta4}
    log.debug(f"power model c={c} p={p}: certified {theta}")
    return theta, certificate


# ── Assumption probe ─────────────────────────────────────────────────────────
@dataclass
class ProbeReport:
    slack_a2: Array
    slack_a3: Array
    slack_dissipative: Array
    passed: bool
    worst_a2: float
    worst_a3: float
    worst_index: int
    tolerance: float = PROBE_TOL

    def as_dict(self) -> dict:
        return {"check": "assumption_probe", "passed": self.passed,
                "worst_a2": self.worst_a2, "worst_a3": self.worst_a3,
                "worst_dissipative": float(np.min(self.slack_dissipative)),
                "worst_index": self.worst_index, "probes": int(len(self.slack_a2))}


def default_probes(d: int, radius: float = PROBE_RADIUS, points: int = PROBE_POINTS,
                   seed: int = 0) -> list[tuple[Array, Array, Array, Array]]:
    """Deterministic probe grid: radial lines along axes and random directions,
    plus random unit directions for u, u1, u2."""
    rng = np.random.default_rng(seed)
    dirs = [np.eye(d)[i] for i in range(d)]
    for _ in range(max(2, d)):
        v = rng.standard_normal(d)
        dirs.append(v / np.linalg.norm(v))
    probes = []
    for e in dirs:
        for r in np.linspace(-radius, radius, points):
            us = rng.standard_normal((3, d))
            us /= np.linalg.norm(us, axis=1, keepdims=True)
            probes.append((r * e, us[0], us[1], us[2]))
            probes.append((r * e, e, e, us[2]))
    return probes


def probe_assumption(model: DriftModel, theta: ThetaParams,
                     probes: list) -> ProbeReport:
    if not probes:
        raise InvalidInput("probe list is empty")
    x = np.array([p[0] for p in probes], dtype=float).reshape(len(probes), -1)
    u = np.array([p[1] for p in probes], dtype=float).reshape(len(probes), -1)
    u1 = np.array([p[2] for p in probes], dtype=float).reshape(len(probes), -1)
    u2 = np.array([p[3] for p in probes], dtype=float).reshape(len(probes), -1)
    if np.any(_norm(u) == 0) or np.any(_norm(u1) == 0) or np.any(_norm(u2) == 0):
        raise InvalidInput("probe directions must be nonzero")

    rx = _norm(x)
    inner = _dot(u, model.jacobian_action(x, u))[:, 0]
    a2 = -theta.theta0 * (1 + theta.theta1 * rx ** theta.theta2) * _norm(u) ** 2 - inner
    hess = _norm(model.hessian_action(x, u1, u2))
    a3 = theta.theta3 * (1 + theta.theta1 * rx) ** (theta.theta2 - 1) * _norm(u1) * _norm(u2) - hess
    g0 = model.drift(np.zeros((1, model.dim)))
    dissip = -theta.theta0 * rx ** 2 - _dot(x, model.drift(x) - g0)[:, 0]

    scale = np.maximum(1.0, np.abs(inner))
    ok = np.all(a2 >= -PROBE_TOL * scale) and np.all(a3 >= -PROBE_TOL * np.maximum(1.0, hess))
    worst = int(np.argmin(np.minimum(a2, a3)))
    report = ProbeReport(a2, a3, dissip, bool(ok), float(a2.min()), float(a3.min()), worst)
    if not report.passed:
        log.warning(f"assumption probe failed for '{model.kind}' at x={x[worst]} "
                    f"(a2 slack {a2[worst]:.3g}, a3 slack {a3[worst]:.3g})")
    return report


def require_assumption(model: DriftModel, theta: ThetaParams | None = None,
                       probes: list | None = None) -> ProbeReport:
    theta = theta or model.require_theta()
    report = probe_assumption(model, theta, probes or default_probes(model.dim))
    if not report.passed:
        raise AssumptionViolation(f"drift '{model.kind}' violates the dissipativity "
                                  f"assumption (worst a2 slack {report.worst_a2:.3g})")
    return report


# ── Contraction constants ───────────────────────────────────────────────────
def _r1_from_kappa(radii: Array, kappa: Array) -> float:
    """Smallest R with kappa(r) R^2 > 8 for every grid radius r >= R."""
    suffix_min = np.minimum.accumulate(kappa[::-1])[::-1]
    best = np.inf
    lower = 0.0
    for r_i, m_i in zip(radii, suffix_min):
        if m_i > 0:
            cand = max(lower, np.sqrt(8.0 / m_i))
            if cand <= r_i:
                best = min(best, cand)
        lower = r_i
    return float(best)


def contraction_constants(model: DriftModel, mode: str = "analytic", *,
                          radii: Array | None = None, pairs: int = KAPPA_PAIRS,
                          box: float = PROBE_RADIUS, seed: int = 0) -> ContractionConstants:
    if mode == "analytic":
        if model.kind != "linear":
            raise InvalidInput("analytic contraction constants need a linear model")
        kappa = 2.0 * float(np.linalg.eigvalsh(model.params["A"])[0])
        R1 = float(np.sqrt(8.0 / kappa))
        return ContractionConstants(0.0, R1, 2.0 / R1 ** 2, lambda r: kappa)
    if mode != "probed":
        raise InvalidInput(f"unknown contraction mode '{mode}'")

    rng = np.random.default_rng(seed)
    if radii is None:
        radii = np.linspace(box / KAPPA_RADII, box, KAPPA_RADII)
    radii = np.asarray(radii, dtype=float)
    d = model.dim
    values = np.empty(len(radii))
    for i, r in enumerate(radii):
        x = rng.standard_normal((pairs, d))
        x *= (box * rng.uniform(size=(pairs, 1)) ** (1.0 / d)
              / np.linalg.norm(x, axis=1, keepdims=True))
        e = rng.standard_normal((pairs, d))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        y = x + np.sqrt(2.0) * r * e
        diff = model.drift(x) - model.drift(y)
        values[i] = np.min(-2.0 * np.sum((x - y) * diff, axis=1) / (2.0 * r ** 2))
    if np.any(values <= 0):
        bad = radii[np.argmax(values <= 0)]
        raise AssumptionViolation(f"probed kappa(r) <= 0 at r={bad:.3g}; "
                                  f"contraction constants undefined")
    R1 = _r1_from_kappa(radii, values)
    if not np.isfinite(R1):
        raise AssumptionViolation("no R1 inside the probed radius grid")
    log.info(f"probed kappa: min {values.min():.4g}, R1={R1:.4g}")
    return ContractionConstants(0.0, R1, 2.0 / R1 ** 2,
                                lambda r: float(np.interp(r, radii, values)),
                                "probed", radii, values)
