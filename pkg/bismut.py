"""
bismut.py - Bismut weights along a FlowBundle and Monte Carlo identity checks.

  I_u(t)          = (1/(sqrt(2) t)) sum_k <var1_k, dB_k>            (left point)
  D_V2 I_u1(t)    = (1/(sqrt(2) t)) sum_k <malliavin_k, dB_k>
                    + (1/(2 t^2)) int_0^t <var1, var2> ds            (trapezoid)
  I_{u1,u2}(t)    = I_u1 I_u2 - D_V2 I_u1
  grad_u2 I_u1(t) = (1/(sqrt(2) t)) sum_k <var11_22_k, dB_k>

Every verifier uses common random numbers across the compared estimators.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.integrate import trapezoid

from config import DEFAULT_SEED, DISC_TOL_FACTOR, MIN_WEIGHT_STEPS
from errors import InvalidInput
from model import DriftModel
from paths import BrownianPath, FlowBundle, TimeGrid, simulate_flows, simulate_state
from stats import Accumulator, map_chunks

if TYPE_CHECKING:
    from stein import TestFunction

log = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)


@dataclass
class WeightSet:
    t: float
    i_u1: np.ndarray
    i_u2: np.ndarray | None = None
    dv2_i_u1: np.ndarray | None = None
    i_u1_u2: np.ndarray | None = None


def _node(bundle: FlowBundle, t: float) -> int:
    if not t > 0:
        raise InvalidInput(f"weight horizon must be > 0, got {t}")
    dt = bundle.grid.dt
    if t < MIN_WEIGHT_STEPS * dt - 1e-12:
        raise InvalidInput(f"t={t} is below the {MIN_WEIGHT_STEPS}*dt floor ({MIN_WEIGHT_STEPS * dt}); "
                           f"refine the grid")
    return bundle.grid.index(t)


def _ito_sum(var: np.ndarray, dB: np.ndarray, k: int) -> np.ndarray:
    return np.einsum("nkd,nkd->n", var[:, :k], dB[:, :k])


def running_ito(var: np.ndarray, dB: np.ndarray) -> np.ndarray:
    """Itô sums sum_{j<k} <var_j, dB_j> at every node k, shape (n, m+1)."""
    inc = np.einsum("nkd,nkd->nk", var[:, :-1], dB)
    out = np.zeros((var.shape[0], var.shape[1]))
    out[:, 1:] = np.cumsum(inc, axis=1)
    return out


def running_weight(var: np.ndarray, dB: np.ndarray, times: np.ndarray) -> np.ndarray:
    """I(t_k) at every node; node 0 is set to 0."""
    sums = running_ito(var, dB)
    scale = np.zeros_like(times)
    scale[1:] = 1.0 / (SQRT2 * times[1:])
    return sums * scale[None, :]


def weight_first(bundle: FlowBundle, t: float, which: str = "var1") -> np.ndarray:
    var = getattr(bundle, which)
    if var is None:
        raise InvalidInput(f"bundle has no {which} path")
    k = _node(bundle, t)
    return _ito_sum(var, bundle.increments, k) / (SQRT2 * t)


def weight_malliavin(bundle: FlowBundle, t: float) -> np.ndarray:
    if bundle.malliavin is None or bundle.var2 is None:
        raise InvalidInput("bundle needs the Malliavin flow and both variation paths")
    k = _node(bundle, t)
    if bundle.malliavin_horizon is None or abs(bundle.malliavin_horizon - t) > 1e-12 * t:
        raise InvalidInput(f"Malliavin flow was built for t={bundle.malliavin_horizon}, not {t}")
    stochastic = _ito_sum(bundle.malliavin, bundle.increments, k) / (SQRT2 * t)
    inner = np.sum(bundle.var1[:, : k + 1] * bundle.var2[:, : k + 1], axis=-1)
    lebesgue = trapezoid(inner, dx=bundle.grid.dt, axis=1) / (2 * t ** 2)
    return stochastic + lebesgue


def weight_second(bundle: FlowBundle, t: float) -> np.ndarray:
    return weight_set(bundle, t).i_u1_u2


def weight_gradient(bundle: FlowBundle, t: float) -> np.ndarray:
    """grad_{u2} I_{u1}(t), the Itô sum of the second variation."""
    if bundle.var11_22 is None:
        raise InvalidInput("bundle has no second variation path")
    k = _node(bundle, t)
    return _ito_sum(bundle.var11_22, bundle.increments, k) / (SQRT2 * t)


def weight_set(bundle: FlowBundle, t: float) -> WeightSet:
    ws = WeightSet(t, weight_first(bundle, t))
    if bundle.var2 is not None:
        ws.i_u2 = weight_first(bundle, t, "var2")
    if bundle.malliavin is not None:
        ws.dv2_i_u1 = weight_malliavin(bundle, t)
        ws.i_u1_u2 = ws.i_u1 * ws.i_u2 - ws.dv2_i_u1
    return ws


# ── Identity checks ──────────────────────────────────────────────────────────
@dataclass
class IdentityCheck:
    check: str
    lhs: float
    rhs: float
    se: float
    replicas: int

    @property
    def passed(self) -> bool:
        return abs(self.lhs - self.rhs) <= 3 * self.se

    def as_dict(self) -> dict:
        return {"check": self.check, "lhs": self.lhs, "rhs": self.rhs,
                "se": self.se, "pass": self.passed}


def _grid_for(t: float, dt: float) -> TimeGrid:
    grid = TimeGrid.from_dt(t, dt)
    if grid.steps < MIN_WEIGHT_STEPS:
        raise InvalidInput(f"t={t} needs at least {MIN_WEIGHT_STEPS} steps of dt={dt}")
    return grid


def _run_pairs(fn, replicas: int, workers: int | None) -> Accumulator:
    acc = Accumulator()
    for part in map_chunks(fn, replicas, workers):
        acc.add(part)
    return acc


def verify_ibp(model: DriftModel, x0, t: float, h: "TestFunction", u, replicas: int,
               *, dt: float = 1e-2, seed: int = DEFAULT_SEED, stream: int = 0,
               workers: int | None = None) -> IdentityCheck:
    """E<grad h(X_t), D_V X_t> against E[h(X_t) int <v, dB>] with
    v = var1 / (sqrt(2) t), so D_V X_t = var1(t) and int <v, dB> = I_u(t)."""
    if replicas < 1000:
        raise InvalidInput(f"verify_ibp needs at least 1000 replicas, got {replicas}")
    grid = _grid_for(t, dt)
    noise = BrownianPath(seed, grid, model.dim, replicas, stream=stream)

    def chunk(a: int, n: int) -> np.ndarray:
        bundle = simulate_flows(model, x0, grid, noise.chunk(a, n), u)
        xt = bundle.state[:, -1]
        lhs = np.sum(h.grad(xt) * bundle.var1[:, -1], axis=-1)
        rhs = h.eval(xt) * weight_first(bundle, t)
        return np.stack([lhs, rhs, lhs - rhs], axis=1)

    acc = _run_pairs(chunk, replicas, workers)
    result = IdentityCheck("bismut_ibp", float(acc.mean[0]), float(acc.mean[1]),
                           float(acc.std_error[2]), replicas)
    log.info(f"IBP check: lhs={result.lhs:.5f} rhs={result.rhs:.5f} se={result.se:.2g}")
    return result


@dataclass
class BELCheck(IdentityCheck):
    fd_se: float = 0.0
    bismut_se: float = 0.0


def verify_bel(model: DriftModel, x0, t: float, h: "TestFunction", u, replicas: int,
               fd_eps: float = 1e-3, *, dt: float = 1e-2, seed: int = DEFAULT_SEED,
               stream: int = 0, workers: int | None = None) -> BELCheck:
    if not 1e-4 <= fd_eps <= 1e-2:
        raise InvalidInput(f"fd_eps must lie in [1e-4, 1e-2], got {fd_eps}")
    grid = _grid_for(t, dt)
    noise = BrownianPath(seed, grid, model.dim, replicas, stream=stream)
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(u, dtype=float)

    def chunk(a: int, n: int) -> np.ndarray:
        path = noise.chunk(a, n)
        plus = simulate_state(model, x0 + fd_eps * u, grid, path)[:, -1]
        minus = simulate_state(model, x0 - fd_eps * u, grid, path)[:, -1]
        bundle = simulate_flows(model, x0, grid, path, u)
        fd = (h.eval(plus) - h.eval(minus)) / (2 * fd_eps)
        bis = h.eval(bundle.state[:, -1]) * weight_first(bundle, t)
        return np.stack([fd, bis, fd - bis], axis=1)

    acc = _run_pairs(chunk, replicas, workers)
    se = acc.std_error
    return BELCheck("bismut_elworthy_li", float(acc.mean[0]), float(acc.mean[1]),
                    float(se[2]), replicas, float(se[0]), float(se[1]))


def verify_second_order(model: DriftModel, x0, t: float, h: "TestFunction", u1, u2,
                        replicas: int, *, dt: float = 1e-2, seed: int = DEFAULT_SEED,
                        stream: int = 0, workers: int | None = None) -> IdentityCheck:
    """E[<grad h(X_t), grad_u2 X_t> I_u1(t)] against E[h(X_t) I_{u1,u2}(t)]."""
    grid = _grid_for(t, dt)
    noise = BrownianPath(seed, grid, model.dim, replicas, stream=stream)

    def chunk(a: int, n: int) -> np.ndarray:
        bundle = simulate_flows(model, x0, grid, noise.chunk(a, n), u1, u2, malliavin=True)
        xt = bundle.state[:, -1]
        ws = weight_set(bundle, t)
        lhs = np.sum(h.grad(xt) * bundle.var2[:, -1], axis=-1) * ws.i_u1
        rhs = h.eval(xt) * ws.i_u1_u2
        return np.stack([lhs, rhs, lhs - rhs], axis=1)

    acc = _run_pairs(chunk, replicas, workers)
    return IdentityCheck("second_order_bismut", float(acc.mean[0]), float(acc.mean[1]),
                         float(acc.std_error[2]), replicas)


@dataclass
class ProductRuleCheck(IdentityCheck):
    tolerance: float = 0.0

    @property
    def passed(self) -> bool:
        return abs(self.lhs - self.rhs) <= 3 * self.se + self.tolerance

    def as_dict(self) -> dict:
        out = super().as_dict()
        out["tolerance"] = self.tolerance
        return out


def verify_weight_product_rule(model: DriftModel, x0, t: float, h: "TestFunction", u1, u2,
                               replicas: int, fd_eps: float = 1e-3, *, dt: float = 1e-2,
                               seed: int = DEFAULT_SEED, stream: int = 0,
                               workers: int | None = None) -> ProductRuleCheck:
    """Central difference of h(X_t) I_u1(t) along u2 (same noise) against the
    product rule <grad h(X_t), grad_u2 X_t> I_u1(t) + h(X_t) grad_u2 I_u1(t).
    The two sides differ by O(dt) per path, allowed as DISC_TOL_FACTOR * dt
    times the mean size of the product-rule terms."""
    if not 1e-4 <= fd_eps <= 1e-2:
        raise InvalidInput(f"fd_eps must lie in [1e-4, 1e-2], got {fd_eps}")
    grid = _grid_for(t, dt)
    noise = BrownianPath(seed, grid, model.dim, replicas, stream=stream)
    x0 = np.asarray(x0, dtype=float)
    u2 = np.asarray(u2, dtype=float)

    def chunk(a: int, n: int) -> np.ndarray:
        path = noise.chunk(a, n)
        ends = []
        for sign in (1.0, -1.0):
            b = simulate_flows(model, x0 + sign * fd_eps * u2, grid, path, u1)
            ends.append(h.eval(b.state[:, -1]) * weight_first(b, t))
        fd = (ends[0] - ends[1]) / (2 * fd_eps)
        b = simulate_flows(model, x0, grid, path, u1, u2, second=True)
        xt = b.state[:, -1]
        first = np.sum(h.grad(xt) * b.var2[:, -1], axis=-1) * weight_first(b, t)
        second = h.eval(xt) * weight_gradient(b, t)
        return np.stack([fd, first + second, fd - first - second,
                         np.abs(first) + np.abs(second)], axis=1)

    acc = _run_pairs(chunk, replicas, workers)
    tol = DISC_TOL_FACTOR * dt * float(acc.mean[3])
    result = ProductRuleCheck("weight_product_rule", float(acc.mean[0]), float(acc.mean[1]),
                              float(acc.std_error[2]), replicas, tol)
    log.info(f"product rule: fd={result.lhs:.5f} sum={result.rhs:.5f} tol={tol:.2g}")
    return result


# ── Moment scaling ───────────────────────────────────────────────────────────
def weight_moments(model: DriftModel, x0, t: float, u1, u2, replicas: int, *,
                   steps: int = 64, seed: int = DEFAULT_SEED, stream: int = 0,
                   workers: int | None = None) -> dict:
    """E|I_u1|, E|D_V2 I_u1|, E|I_{u1,u2}| at horizon t on a grid of `steps` steps."""
    grid = TimeGrid(t, steps)
    noise = BrownianPath(seed, grid, model.dim, replicas, stream=stream)

    def chunk(a: int, n: int) -> np.ndarray:
        bundle = simulate_flows(model, x0, grid, noise.chunk(a, n), u1, u2, malliavin=True)
        ws = weight_set(bundle, t)
        return np.abs(np.stack([ws.i_u1, ws.dv2_i_u1, ws.i_u1_u2], axis=1))

    acc = _run_pairs(chunk, replicas, workers)
    keys = ("abs_i_u", "abs_dv_i_u", "abs_i_uu")
    out = {"t": t}
    for i, k in enumerate(keys):
        out[k] = float(acc.mean[i])
        out[f"{k}_se"] = float(acc.std_error[i])
    return out
