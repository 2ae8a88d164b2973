"""
stein.py - Monte Carlo solution of the Stein equation
    Laplacian f + <g, grad f> = h - mu(h)
through its semigroup representations, plus a Gauss-Hermite oracle for the
standard normal target and a residual checker.

Sign convention: f = -int_0^inf E[h(X_t) - mu(h)] dt, and every derivative
representation carries the same leading minus.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import integrate
from scipy.integrate import trapezoid
from scipy.interpolate import RegularGridInterpolator

from bismut import running_weight
from config import (CACHE_NODES, CACHE_STD_SPAN, DEFAULT_SEED, ERGODIC_BATCHES,
                    ERGODIC_CHAINS, ERGODIC_DT, HERMITE_NODES, MIN_WEIGHT_STEPS,
                    TAU_NODES)
from errors import InvalidInput
from model import ContractionConstants, DriftModel, contraction_constants
from paths import BrownianPath, TimeGrid, simulate_flows, simulate_state
from stats import Accumulator, batch_means_se, map_chunks

log = logging.getLogger(__name__)

Array = np.ndarray


# ────────────────────────────────────────────────────────────────────────────
# TEST FUNCTIONS
# ────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class TestFunction:
    """h with its gradient; both act on arrays of shape (..., d)."""
    __test__ = False

    name: str
    eval: Callable[[Array], Array]
    grad: Callable[[Array], Array]
    lip_bound: float

    def check_lipschitz(self, points: Array) -> bool:
        return bool(np.all(np.linalg.norm(self.grad(points), axis=-1) <= self.lip_bound * (1 + 1e-12)))


def linear_h(a) -> TestFunction:
    a = np.asarray(a, dtype=float)
    return TestFunction("linear", lambda x: x @ a,
                        lambda x: np.broadcast_to(a, np.shape(x)).copy(),
                        float(np.linalg.norm(a)))


def square_h(radius: float = 8.0) -> TestFunction:
    """|x|^2; lip_bound is the Lipschitz constant on the ball of the given radius."""
    return TestFunction("square", lambda x: np.sum(x * x, axis=-1), lambda x: 2 * x,
                        2 * radius)


def coordinate_square_h(i: int, radius: float = 8.0) -> TestFunction:
    def grad(x):
        out = np.zeros_like(x)
        out[..., i] = 2 * x[..., i]
        return out
    return TestFunction(f"x{i}^2", lambda x: x[..., i] ** 2, grad, 2 * radius)


def abs_h() -> TestFunction:
    def grad(x):
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        return np.where(r > 0, x / np.where(r > 0, r, 1.0), 0.0)
    return TestFunction("abs", lambda x: np.linalg.norm(x, axis=-1), grad, 1.0)


def sine_h(a) -> TestFunction:
    a = np.asarray(a, dtype=float)
    return TestFunction("sin", lambda x: np.sin(x @ a),
                        lambda x: np.cos(x @ a)[..., None] * a, float(np.linalg.norm(a)))


def constant_h(value: float = 1.0) -> TestFunction:
    return TestFunction("const", lambda x: np.full(np.shape(x)[:-1], float(value)),
                        lambda x: np.zeros(np.shape(x)), 0.0)


def test_function(name: str, d: int) -> TestFunction:
    """Named test functions used by the CLI; the first coordinate for 1-d shapes."""
    e1 = np.eye(d)[0]
    table = {"x": lambda: linear_h(e1), "x2": lambda: coordinate_square_h(0),
             "square": square_h, "abs": abs_h, "sin": lambda: sine_h(e1),
             "const": constant_h}
    if name not in table:
        raise InvalidInput(f"unknown test function '{name}' (known: {', '.join(table)})")
    return table[name]()


test_function.__test__ = False


# ────────────────────────────────────────────────────────────────────────────
# RESULT TYPES
# ────────────────────────────────────────────────────────────────────────────
@dataclass
class SteinEstimate:
    value: float
    std_error: float
    truncation_tail: float
    horizon: float
    replicas: int
    seed: int = DEFAULT_SEED
    point: list = field(default_factory=list)
    directions: list = field(default_factory=list)
    kind: str = "f"

    def as_dict(self) -> dict:
        return {"estimate": self.kind, "point": self.point, "directions": self.directions,
                "value": self.value, "se": self.std_error, "tail": self.truncation_tail,
                "horizon": self.horizon, "replicas": self.replicas, "seed": self.seed}


@dataclass
class TargetMean:
    value: float
    method: str
    error_estimate: float


# ────────────────────────────────────────────────────────────────────────────
# TARGET MEAN
# ────────────────────────────────────────────────────────────────────────────
def hermite_rule(d: int, nodes: int) -> tuple[Array, Array]:
    """Tensor Gauss-Hermite rule for N(0, I_d): points (N, d), weights (N,)."""
    z, w = hermgauss(nodes)
    z = z * np.sqrt(2.0)
    w = w / np.sqrt(np.pi)
    grids = np.meshgrid(*([z] * d), indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.ones(points.shape[0])
    for wg in np.meshgrid(*([w] * d), indexing="ij"):
        weights = weights * wg.ravel()
    return points, weights


def _ergodic_run(model: DriftModel, steps: int, *, dt: float, seed: int,
                 chains: int = ERGODIC_CHAINS) -> tuple[Array, Array]:
    """Parallel Euler chains from the origin after a 10/theta0 burn-in.
    Returns the post-burn-in path (steps, chains, d) and the final states."""
    theta = model.require_theta()
    burn = int(np.ceil(10.0 / theta.theta0 / dt))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(7,))))
    x = np.zeros((chains, model.dim))
    scale = np.sqrt(2.0 * dt)
    for _ in range(burn):
        x = x + model.drift(x) * dt + scale * rng.standard_normal(x.shape)
    out = np.empty((steps, chains, model.dim))
    for k in range(steps):
        x = x + model.drift(x) * dt + scale * rng.standard_normal(x.shape)
        out[k] = x
    return out, x


def target_mean(model: DriftModel, h: TestFunction, method: str = "gauss_quadrature",
                budget: int = 40, *, dt: float | None = None,
                seed: int = DEFAULT_SEED) -> TargetMean:
    """mu(h). For gauss_quadrature, budget is nodes per axis (at least 20); for
    ergodic_average, budget is the total number of post-burn-in samples.
    With dt given, the quadrature targets the stationary law of the Euler
    chain at that step, covariance A^{-1}(I - dt A/2)^{-1}."""
    if not budget > 0:
        raise InvalidInput(f"budget must be > 0, got {budget}")
    if method == "gauss_quadrature":
        if model.kind != "linear":
            raise InvalidInput("gauss_quadrature needs a linear model (Gaussian target)")
        if model.dim > 3:
            raise InvalidInput(f"gauss_quadrature supports d <= 3, got {model.dim}")
        A = model.params["A"]
        cov = np.linalg.inv(A)
        if dt:
            top = float(np.linalg.eigvalsh(A).max())
            if dt * top >= 2:
                raise InvalidInput(f"Euler chain is unstable: dt * lambda_max = {dt * top:.3g} must be < 2")
            cov = cov @ np.linalg.inv(np.eye(model.dim) - 0.5 * dt * A)
        chol = np.linalg.cholesky(cov)
        nodes = max(20, min(int(budget), 100))

        def rule(n):
            z, w = hermite_rule(model.dim, n)
            return float(np.sum(w * h.eval(z @ chol.T)))

        value = rule(nodes)
        return TargetMean(value, method, abs(value - rule(nodes + 10)))
    if method == "ergodic_average":
        per_batch = max(int(np.ceil(budget / (ERGODIC_CHAINS * ERGODIC_BATCHES))), 1)
        steps = per_batch * ERGODIC_BATCHES
        path, _ = _ergodic_run(model, steps, dt=dt or ERGODIC_DT, seed=seed)
        values = h.eval(path)                           # (steps, chains)
        se = batch_means_se(values.T.ravel(), ERGODIC_BATCHES * ERGODIC_CHAINS)
        log.debug(f"ergodic mean of {h.name}: {values.mean():.5f} +/- {se:.2g}")
        return TargetMean(float(values.mean()), method, se)
    raise InvalidInput(f"unknown target-mean method '{method}'")


def default_target(model: DriftModel, h: TestFunction, dt: float,
                   seed: int = DEFAULT_SEED) -> TargetMean:
    """Centering at the same step size as the path estimators, so the
    discretized integrand decays to zero."""
    if model.kind == "linear" and model.dim <= 3:
        return target_mean(model, h, "gauss_quadrature", 40, dt=dt)
    return target_mean(model, h, "ergodic_average", 400_000, dt=dt, seed=seed)


# ────────────────────────────────────────────────────────────────────────────
# ESTIMATORS
# ────────────────────────────────────────────────────────────────────────────
def resolve_contraction(model: DriftModel,
                        contraction: ContractionConstants | None = None) -> ContractionConstants:
    if contraction is not None:
        return contraction
    return contraction_constants(model, "analytic" if model.kind == "linear" else "probed")


def _rate(model: DriftModel, contraction: ContractionConstants | None) -> float:
    return resolve_contraction(model, contraction).c


def _check_horizon(model: DriftModel, T: float, contraction) -> float:
    c = _rate(model, contraction)
    if T < 5.0 / c - 1e-12:
        raise InvalidInput(f"horizon T={T} too small: contraction rate c={c:.4g} "
                           f"requires T >= {5.0 / c:.4g}")
    return c


def _first_moment_bound(model: DriftModel) -> float:
    theta = model.require_theta()
    g0 = model.drift(np.zeros((1, model.dim)))[0]
    return float(np.sqrt((2 * model.dim + g0 @ g0 / theta.theta0) / theta.theta0))


def _point(x, d: int) -> Array:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != d:
        raise InvalidInput(f"point has dimension {x.shape[0]}, model has {d}")
    return x


def _collect(chunk, replicas: int, workers) -> Accumulator:
    acc = Accumulator()
    for part in map_chunks(chunk, replicas, workers):
        acc.add(part)
    return acc


def estimate_f(model: DriftModel, h: TestFunction, x, T: float, replicas: int, *,
               dt: float = 1e-2, seed: int = DEFAULT_SEED, stream: int = 0,
               target: TargetMean | None = None,
               contraction: ContractionConstants | None = None,
               workers: int | None = None) -> SteinEstimate:
    x = _point(x, model.dim)
    c = _check_horizon(model, T, contraction)
    target = target or default_target(model, h, dt, seed)
    grid = TimeGrid.from_dt(T, dt)
    noise = BrownianPath(seed, grid, model.dim, replicas, stream=stream)

    def chunk(a: int, n: int) -> Array:
        states = simulate_state(model, x, grid, noise.chunk(a, n))
        return -trapezoid(h.eval(states) - target.value, dx=grid.dt, axis=1)

    acc = _collect(chunk, replicas, workers)
    se = float(np.sqrt(acc.std_error ** 2 + (T * target.error_estimate) ** 2))
    tail = 2 * np.exp(-c * T) * (_first_moment_bound(model) + np.linalg.norm(x)) * h.lip_bound / c
    return SteinEstimate(float(acc.mean), se, float(tail), T, replicas, seed,
                         x.tolist(), [], "f")


def estimate_grad_f(model: DriftModel, h: TestFunction, x, u, T: float, replicas: int, *,
                    dt: float = 1e-2, seed: int = DEFAULT_SEED, stream: int = 0,
                    contraction: ContractionConstants | None = None,
                    workers: int | None = None) -> SteinEstimate:
    """grad_u f(x) = -int_0^T E<grad h(X_t), grad_u X_t> dt."""
    x = _point(x, model.dim)
    u = _point(u, model.dim)
    _check_horizon(model, T, contraction)
    theta = model.require_theta()
    grid = TimeGrid.from_dt(T, dt)
    noise = BrownianPath(seed, grid, model.dim, replicas, stream=stream)

    def chunk(a: int, n: int) -> Array:
        bundle = simulate_flows(model, x, grid, noise.chunk(a, n), u)
        integrand = np.sum(h.grad(bundle.state) * bundle.var1, axis=-1)
        return -trapezoid(integrand, dx=grid.dt, axis=1)

    acc = _collect(chunk, replicas, workers)
    tail = h.lip_bound * np.linalg.norm(u) * np.exp(-theta.theta0 * T) / theta.theta0
    return SteinEstimate(float(acc.mean), float(acc.std_error), float(tail), T, replicas,
                         seed, x.tolist(), [u.tolist()], "grad_f")


def resolvent_weights(grid: TimeGrid, tau_nodes: int = TAU_NODES) -> tuple[Array, float]:
    """Node weights for int_0^T e^{-t} F(t) dt on the path grid:
    on [0, t_min] the integrand (finite at 0) is extrapolated linearly from
    its values at t_min and 2 t_min, then a t = tau^2 trapezoid on [t_min, 1]
    with tau nodes snapped to grid nodes, and a plain trapezoid on [1, T].
    Returns (weights over the m+1 nodes, t_min).
    """
    dt, m = grid.dt, grid.steps
    times = grid.times
    k_min = MIN_WEIGHT_STEPS
    t_min = times[k_min]
    upper = min(1.0, grid.horizon)
    k_up = int(round(upper / dt))
    w = np.zeros(m + 1)
    if 2 * k_min <= m:
        w[k_min] = 1.5 * t_min * np.exp(-t_min)
        w[2 * k_min] = -0.5 * t_min * np.exp(-times[2 * k_min])
    else:
        w[k_min] = t_min * np.exp(-t_min)
    taus = np.linspace(np.sqrt(t_min), np.sqrt(times[k_up]), tau_nodes)
    ks = np.unique(np.clip(np.rint(taus ** 2 / dt).astype(int), k_min, k_up))
    tau = np.sqrt(times[ks])
    if len(ks) > 1:
        omega = np.zeros(len(ks))
        gaps = np.diff(tau)
        omega[:-1] += gaps / 2
        omega[1:] += gaps / 2
        w[ks] += omega * 2 * tau * np.exp(-times[ks])
    if k_up < m:
        seg = np.full(m - k_up + 1, dt)
        seg[0] = seg[-1] = dt / 2
        w[k_up:] += seg * np.exp(-times[k_up:])
    return w, float(t_min)


def estimate_grad_f_resolvent(model: DriftModel, h: TestFunction, x, u, T: float,
                              replicas: int, f_plugin: Callable[[Array], Array], *,
                              dt: float = 1e-2, seed: int = DEFAULT_SEED, stream: int = 0,
                              target: TargetMean | None = None,
                              contraction: ContractionConstants | None = None,
                              workers: int | None = None) -> SteinEstimate:
    """grad_u f(x) = int_0^inf e^{-t} E[(f - h + mu(h))(X_t) I_u(t)] dt."""
    x = _point(x, model.dim)
    u = _point(u, model.dim)
    _check_horizon(model, T, contraction)
    theta = model.require_theta()
    target = target or default_target(model, h, dt, seed)
    grid = TimeGrid.from_dt(T, dt)
    weights, t_min = resolvent_weights(grid)
    noise = BrownianPath(seed, grid, model.dim, replicas, stream=stream)

    def chunk(a: int, n: int) -> Array:
        bundle = simulate_flows(model, x, grid, noise.chunk(a, n), u)
        i_u = running_weight(bundle.var1, bundle.increments, grid.times)
        phi = f_plugin(bundle.state) - h.eval(bundle.state) + target.value
        return (phi * i_u) @ weights

    acc = _collect(chunk, replicas, workers)
    grad_phi = (1.0 / theta.theta0 + 1.0) * h.lip_bound * np.linalg.norm(u)
    tail = (np.exp(-T) + t_min) * grad_phi
    return SteinEstimate(float(acc.mean), float(acc.std_error), float(tail), T, replicas,
                         seed, x.tolist(), [u.tolist()], "grad_f_resolvent")


def estimate_hess_f(model: DriftModel, h: TestFunction, x, u1, u2, T: float, replicas: int,
                    grad_f_plugin: Callable[[Array], Array],
                    f_plugin: Callable[[Array], Array], *,
                    dt: float = 1e-2, seed: int = DEFAULT_SEED, stream: int = 0,
                    target: TargetMean | None = None,
                    contraction: ContractionConstants | None = None,
                    workers: int | None = None) -> SteinEstimate:
    """grad_u2 grad_u1 f(x) = int_0^inf e^{-t} { E[<grad phi(X_t), grad_u2 X_t> I_u1(t)]
                                               + E[phi(X_t) grad_u2 I_u1(t)] } dt
    with phi = f - h + mu(h): the resolvent gradient form differentiated once more."""
    x = _point(x, model.dim)
    u1 = _point(u1, model.dim)
    u2 = _point(u2, model.dim)
    _check_horizon(model, T, contraction)
    theta = model.require_theta()
    target = target or default_target(model, h, dt, seed)
    grid = TimeGrid.from_dt(T, dt)
    weights, t_min = resolvent_weights(grid)
    noise = BrownianPath(seed, grid, model.dim, replicas, stream=stream)

    def chunk(a: int, n: int) -> Array:
        b = simulate_flows(model, x, grid, noise.chunk(a, n), u1, u2, second=True)
        i_u1 = running_weight(b.var1, b.increments, grid.times)
        d_i = running_weight(b.var11_22, b.increments, grid.times)
        grad_phi = grad_f_plugin(b.state) - h.grad(b.state)
        phi = f_plugin(b.state) - h.eval(b.state) + target.value
        integrand = np.sum(grad_phi * b.var2, axis=-1) * i_u1 + phi * d_i
        return integrand @ weights

    acc = _collect(chunk, replicas, workers)
    scale = 2 * (1.0 / theta.theta0 + 1.0) * h.lip_bound * np.linalg.norm(u1) * np.linalg.norm(u2)
    tail = (np.exp(-T) + np.sqrt(2 * t_min)) * scale
    return SteinEstimate(float(acc.mean), float(acc.std_error), float(tail), T, replicas,
                         seed, x.tolist(), [u1.tolist(), u2.tolist()], "hess_f")


# ────────────────────────────────────────────────────────────────────────────
# PLUG-IN CACHES
# ────────────────────────────────────────────────────────────────────────────
@dataclass
class PluginCache:
    """Cache-grid estimates of f or grad f with linear interpolation. All nodes
    share one noise stream per direction, so errors are common across nodes."""
    axes: list
    values: Array
    std_errors: Array
    kind: str

    def __post_init__(self):
        self._interp = RegularGridInterpolator(tuple(self.axes), self.values, method="linear",
                                               bounds_error=False, fill_value=None)
        self._se = RegularGridInterpolator(tuple(self.axes), self.std_errors, method="linear",
                                           bounds_error=False, fill_value=None)

    def __call__(self, points: Array) -> Array:
        points = np.asarray(points, dtype=float)
        flat = points.reshape(-1, points.shape[-1])
        out = self._interp(flat)
        return out.reshape(points.shape[:-1] + out.shape[1:])

    def std_error_at(self, points: Array) -> Array:
        points = np.asarray(points, dtype=float)
        flat = points.reshape(-1, points.shape[-1])
        out = self._se(flat)
        return out.reshape(points.shape[:-1] + out.shape[1:])


def target_spread(model: DriftModel, dt: float = ERGODIC_DT,
                  seed: int = DEFAULT_SEED) -> tuple[Array, Array]:
    """Mean and per-axis standard deviation of mu."""
    if model.kind == "linear":
        cov = np.linalg.inv(model.params["A"])
        return np.zeros(model.dim), np.sqrt(np.diag(cov))
    path, _ = _ergodic_run(model, 400, dt=dt, seed=seed)
    flat = path.reshape(-1, model.dim)
    return flat.mean(axis=0), flat.std(axis=0)


def cache_axes(model: DriftModel, nodes: int | None = None, *, dt: float = ERGODIC_DT,
               seed: int = DEFAULT_SEED) -> list:
    nodes = nodes or CACHE_NODES.get(model.dim, 5)
    center, std = target_spread(model, dt, seed)
    return [np.linspace(c - CACHE_STD_SPAN * s, c + CACHE_STD_SPAN * s, nodes)
            for c, s in zip(center, std)]


def build_f_cache(model: DriftModel, h: TestFunction, T: float, replicas: int, *,
                  nodes: int | None = None, dt: float = 1e-2, seed: int = DEFAULT_SEED,
                  target: TargetMean | None = None,
                  contraction: ContractionConstants | None = None,
                  workers: int | None = None) -> PluginCache:
    contraction = resolve_contraction(model, contraction)
    target = target or default_target(model, h, dt, seed)
    axes = cache_axes(model, nodes, seed=seed)
    shape = tuple(len(a) for a in axes)
    values, ses = np.empty(shape), np.empty(shape)
    for idx in np.ndindex(*shape):
        x = np.array([axes[j][idx[j]] for j in range(model.dim)])
        est = estimate_f(model, h, x, T, replicas, dt=dt, seed=seed, stream=1000,
                         target=target, contraction=contraction, workers=workers)
        values[idx], ses[idx] = est.value, est.std_error
    log.info(f"f cache for {h.name}: {values.size} nodes, max se {ses.max():.2g}")
    return PluginCache(axes, values, ses, "f")


def build_grad_cache(model: DriftModel, h: TestFunction, T: float, replicas: int, *,
                     nodes: int | None = None, dt: float = 1e-2, seed: int = DEFAULT_SEED,
                     contraction: ContractionConstants | None = None,
                     workers: int | None = None) -> PluginCache:
    contraction = resolve_contraction(model, contraction)
    axes = cache_axes(model, nodes, seed=seed)
    shape = tuple(len(a) for a in axes)
    d = model.dim
    values, ses = np.empty(shape + (d,)), np.empty(shape + (d,))
    basis = np.eye(d)
    for idx in np.ndindex(*shape):
        x = np.array([axes[j][idx[j]] for j in range(d)])
        for k in range(d):
            est = estimate_grad_f(model, h, x, basis[k], T, replicas, dt=dt, seed=seed,
                                  stream=5000 + k, contraction=contraction,
                                  workers=workers)
            values[idx + (k,)], ses[idx + (k,)] = est.value, est.std_error
    log.info(f"grad f cache for {h.name}: {values.size} entries, max se {ses.max():.2g}")
    return PluginCache(axes, values, ses, "grad_f")


# ────────────────────────────────────────────────────────────────────────────
# GAUSSIAN ORACLE
# ────────────────────────────────────────────────────────────────────────────
def gaussian_oracle(h: TestFunction, x, order: str = "value", u1=None, u2=None,
                    nodes: int | None = None) -> float:
    """Stein solution for the standard normal target,
        f(x) = -int_0^inf {E h(e^{-s}x + sigma_s Z) - E h(Z)} ds,
    sigma_s = sqrt(1 - e^{-2s}); derivatives act on h with the e^{-s} chain
    factor, the second one moved onto the Gaussian kernel. Time integral in
    s = tau^2 with adaptive quadrature."""
    x = np.asarray(x, dtype=float).reshape(-1)
    d = x.shape[0]
    if d > 3:
        raise InvalidInput(f"gaussian_oracle supports d <= 3, got {d}")
    z, w = hermite_rule(d, nodes or HERMITE_NODES[d])
    mean_h = float(np.sum(w * h.eval(z)))

    if order == "value":
        def inner(s, sig):
            return np.sum(w * h.eval(np.exp(-s) * x + sig * z)) - mean_h
    elif order == "grad":
        u = np.asarray(u1, dtype=float).reshape(-1)

        def inner(s, sig):
            return np.exp(-s) * np.sum(w * (h.grad(np.exp(-s) * x + sig * z) @ u))
    elif order == "hess":
        a = np.asarray(u1, dtype=float).reshape(-1)
        b = np.asarray(u2, dtype=float).reshape(-1)

        def inner(s, sig):
            if sig == 0:
                return 0.0
            vals = (h.grad(np.exp(-s) * x + sig * z) @ a) * (z @ b)
            return np.exp(-2 * s) / sig * np.sum(w * vals)
    else:
        raise InvalidInput(f"unknown oracle order '{order}'")

    def integrand(tau):
        s = tau * tau
        sig = np.sqrt(-np.expm1(-2 * s))
        return 2 * tau * inner(s, sig)

    value, _ = integrate.quad(integrand, 0.0, np.inf, limit=400)
    return -float(value)


# ────────────────────────────────────────────────────────────────────────────
# DIAGNOSTICS
# ────────────────────────────────────────────────────────────────────────────
@dataclass
class SteinResidual:
    residual: float
    std_error: float
    laplacian: float
    drift_term: float
    centered_h: float
    components: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return abs(self.residual) <= 3 * self.std_error

    def as_dict(self) -> dict:
        return {"check": "stein_residual", "residual": self.residual, "se": self.std_error,
                "laplacian": self.laplacian, "drift_term": self.drift_term,
                "centered_h": self.centered_h, "pass": self.passed}


def stein_residual(model: DriftModel, h: TestFunction, x, T: float, replicas: int, *,
                   dt: float = 1e-2, seed: int = DEFAULT_SEED,
                   target: TargetMean | None = None,
                   f_cache: PluginCache | None = None,
                   grad_cache: PluginCache | None = None,
                   cache_replicas: int | None = None,
                   contraction: ContractionConstants | None = None,
                   workers: int | None = None) -> SteinResidual:
    d = model.dim
    if d > 3:
        raise InvalidInput(f"stein_residual supports d <= 3, got {d}")
    x = _point(x, d)
    target = target or default_target(model, h, dt, seed)
    contraction = resolve_contraction(model, contraction)
    cache_replicas = cache_replicas or max(replicas // 4, 1000)
    f_cache = f_cache or build_f_cache(model, h, T, cache_replicas, dt=dt, seed=seed,
                                       target=target, contraction=contraction, workers=workers)
    grad_cache = grad_cache or build_grad_cache(model, h, T, cache_replicas, dt=dt, seed=seed,
                                                contraction=contraction, workers=workers)
    g = model.drift(x[None, :])[0]
    basis = np.eye(d)
    components, lap, lap_var, drift, drift_var = [], 0.0, 0.0, 0.0, 0.0
    for i in range(d):
        grad = estimate_grad_f(model, h, x, basis[i], T, replicas, dt=dt, seed=seed,
                               stream=10 + i, contraction=contraction, workers=workers)
        hess = estimate_hess_f(model, h, x, basis[i], basis[i], T, replicas, grad_cache, f_cache,
                               dt=dt, seed=seed, stream=20 + i, target=target,
                               contraction=contraction, workers=workers)
        components += [grad.as_dict(), hess.as_dict()]
        lap += hess.value
        lap_var += hess.std_error ** 2
        drift += g[i] * grad.value
        drift_var += (g[i] * grad.std_error) ** 2
    centered = float(h.eval(x)) - target.value
    residual = lap + drift - centered
    se = float(np.sqrt(lap_var + drift_var + target.error_estimate ** 2))
    log.info(f"Stein residual at x={x.tolist()}: {residual:.4g} (se {se:.2g})")
    return SteinResidual(float(residual), se, float(lap), float(drift), centered, components)


def verify_resolvent_identity(model: DriftModel, h: TestFunction, xs, T: float, replicas: int,
                              f_cache: PluginCache, *, dt: float = 1e-2,
                              seed: int = DEFAULT_SEED, target: TargetMean | None = None,
                              workers: int | None = None) -> list[dict]:
    """f(x) against int_0^T e^{-t} E[f(X_t) + mu(h) - h(X_t)] dt with f from the cache."""
    target = target or default_target(model, h, dt, seed)
    grid = TimeGrid.from_dt(T, dt)
    discount = np.exp(-grid.times)
    records = []
    for j, x in enumerate(xs):
        x = _point(x, model.dim)
        noise = BrownianPath(seed, grid, model.dim, replicas, stream=300 + j)

        def chunk(a: int, n: int) -> Array:
            states = simulate_state(model, x, grid, noise.chunk(a, n))
            vals = f_cache(states) + target.value - h.eval(states)
            return trapezoid(vals * discount, dx=grid.dt, axis=1)

        acc = _collect(chunk, replicas, workers)
        lhs = float(f_cache(x[None, :])[0])
        se = float(np.sqrt(acc.std_error ** 2 + f_cache.std_error_at(x[None, :])[0] ** 2))
        records.append({"check": "resolvent_identity", "point": x.tolist(), "lhs": lhs,
                        "rhs": float(acc.mean), "se": se,
                        "pass": abs(lhs - float(acc.mean)) <= 3 * se})
    return records


def hessian_modulus(hess_at: Callable[[Array], float], x, u, eps_grid=(0.2, 0.1, 0.05)) -> dict:
    """Increments |hess(x + eps u) - hess(x)| against eps(|log eps| v 1).
    A single constant C = max ratio covers every eps; pass when the ratios do
    not blow up as eps shrinks."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    base = hess_at(x)
    eps = np.asarray(eps_grid, dtype=float)
    increments = np.array([abs(hess_at(x + e * u) - base) for e in eps])
    envelope = eps * np.maximum(np.abs(np.log(eps)), 1.0)
    ratios = increments / envelope
    C = float(ratios.max())
    small_eps_ratio = float(ratios[np.argmin(eps)])
    return {"check": "hessian_log_lipschitz", "eps": eps.tolist(),
            "increments": increments.tolist(), "envelope": envelope.tolist(),
            "C": C, "pass": bool(np.all(increments <= C * envelope * (1 + 1e-12))
                                 and small_eps_ratio <= 2 * float(ratios[np.argmax(eps)]) + 1e-12)}
