"""
paths.py - Langevin path simulation with variation and Malliavin flows.
State: Euler-Maruyama. Variation / Malliavin ODEs: Heun along the stored path.
All arrays carry a leading replica axis: states[n, m+1, d].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from config import DISC_TOL_FACTOR, DIVERGENCE_THRESHOLD, NOISE_BLOCK
from errors import DivergenceError, InvalidInput
from model import DriftModel, ThetaParams
from stats import fit_exponent

log = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise InvalidInput(f"horizon must be > 0, got {self.horizon}")
        if int(self.steps) < 1:
            raise InvalidInput(f"steps must be >= 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    @classmethod
    def from_dt(cls, horizon: float, dt: float) -> "TimeGrid":
        return cls(horizon, max(1, int(round(horizon / dt))))

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)

    def index(self, t: float) -> int:
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9 * max(1.0, t) or k > self.steps:
            raise InvalidInput(f"t={t} is not a node of the grid (dt={self.dt})")
        return k


# ── Counter-keyed Brownian noise ─────────────────────────────────────────────
def _noise_rng(seed: int, stream: int, level: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(level), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def _block_increments(seed: int, stream: int, block: int, grid: TimeGrid,
                      dim: int) -> np.ndarray:
    """Increments for one replica block. The root grid strips the factors of
    two from the step count; each finer level splits every increment with a
    Brownian bridge, so doubling the steps refines the same path."""
    m = grid.steps
    levels = (m & -m).bit_length() - 1
    m0 = m >> levels
    h = grid.horizon / m0
    inc = _noise_rng(seed, stream, 0, block).standard_normal((NOISE_BLOCK, m0, dim)) * np.sqrt(h)
    for level in range(1, levels + 1):
        h /= 2
        xi = _noise_rng(seed, stream, level, block).standard_normal(inc.shape) * np.sqrt(h / 2)
        half = inc / 2
        inc = np.stack([half + xi, half - xi], axis=2).reshape(NOISE_BLOCK, -1, dim)
    return inc


@dataclass(frozen=True)
class BrownianPath:
    seed: int
    grid: TimeGrid
    dim: int
    replicas: int = 1
    start: int = 0
    stream: int = 0

    @cached_property
    def increments(self) -> np.ndarray:
        first = self.start // NOISE_BLOCK
        last = (self.start + self.replicas - 1) // NOISE_BLOCK
        blocks = [_block_increments(self.seed, self.stream, b, self.grid, self.dim)
                  for b in range(first, last + 1)]
        offset = self.start - first * NOISE_BLOCK
        return np.concatenate(blocks, axis=0)[offset: offset + self.replicas]

    def chunk(self, start: int, count: int) -> "BrownianPath":
        return BrownianPath(self.seed, self.grid, self.dim, count, self.start + start, self.stream)


@dataclass
class FlowBundle:
    state: np.ndarray
    increments: np.ndarray
    grid: TimeGrid
    x0: np.ndarray
    u1: np.ndarray
    var1: np.ndarray | None = None
    u2: np.ndarray | None = None
    var2: np.ndarray | None = None
    var11_22: np.ndarray | None = None
    malliavin: np.ndarray | None = None
    malliavin_horizon: float | None = None

    @property
    def replicas(self) -> int:
        return self.state.shape[0]


# ── Integrators ──────────────────────────────────────────────────────────────
def _check_finite(values: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(values)) or np.max(np.abs(values), initial=0.0) > DIVERGENCE_THRESHOLD:
        raise DivergenceError(step, f"non-finite or runaway value at step {step} "
                                    f"(|x| > {DIVERGENCE_THRESHOLD:g}); reduce dt")


def simulate_state(model: DriftModel, x0, grid: TimeGrid, noise: BrownianPath) -> np.ndarray:
    dB = noise.increments
    n, m, d = dB.shape
    if d != model.dim or m != grid.steps:
        raise InvalidInput(f"noise shape {dB.shape} does not match model dim {model.dim} "
                           f"and {grid.steps} steps")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != d:
        raise InvalidInput(f"x0 has dimension {x0.shape[-1]}, model has {d}")
    dt = grid.dt
    X = np.empty((n, m + 1, d))
    X[:, 0] = x0
    for k in range(m):
        X[:, k + 1] = X[:, k] + model.drift(X[:, k]) * dt + SQRT2 * dB[:, k]
        _check_finite(X[:, k + 1], k + 1)
    return X


def _integrate_forced(model: DriftModel, states: np.ndarray, grid: TimeGrid,
                      z0: np.ndarray, forcing: np.ndarray | None = None) -> np.ndarray:
    """Heun for z' = grad g(X) z + F along a stored path."""
    n, m1, d = states.shape
    dt = grid.dt
    Z = np.empty_like(states)
    Z[:, 0] = z0
    for k in range(m1 - 1):
        f0 = model.jacobian_action(states[:, k], Z[:, k])
        f1 = 0.0
        if forcing is not None:
            f0 = f0 + forcing[:, k]
            f1 = forcing[:, k + 1]
        pred = Z[:, k] + dt * f0
        Z[:, k + 1] = Z[:, k] + 0.5 * dt * (f0 + model.jacobian_action(states[:, k + 1], pred) + f1)
        _check_finite(Z[:, k + 1], k + 1)
    return Z


def simulate_variation1(model: DriftModel, states: np.ndarray, u, grid: TimeGrid) -> np.ndarray:
    u = np.broadcast_to(np.asarray(u, dtype=float), states[:, 0].shape)
    return _integrate_forced(model, states, grid, u)


def simulate_variation2(model: DriftModel, states: np.ndarray, var1: np.ndarray,
                        var2: np.ndarray, grid: TimeGrid) -> np.ndarray:
    forcing = model.hessian_action(states, var1, var2)
    return _integrate_forced(model, states, grid, np.zeros_like(states[:, 0]), forcing)


def simulate_malliavin(model: DriftModel, states: np.ndarray, var1: np.ndarray,
                       var2: np.ndarray, grid: TimeGrid, t: float) -> np.ndarray:
    if abs(t - grid.horizon) > 1e-12 * grid.horizon:
        raise InvalidInput(f"Malliavin flow needs t equal to the grid horizon "
                           f"({grid.horizon}), got {t}")
    weight = (grid.times / t)[None, :, None]
    forcing = weight * model.hessian_action(states, var1, var2)
    return _integrate_forced(model, states, grid, np.zeros_like(states[:, 0]), forcing)


def simulate_flows(model: DriftModel, x0, grid: TimeGrid, noise: BrownianPath, u1,
                   u2=None, *, second: bool = False, malliavin: bool = False) -> FlowBundle:
    """State plus every flow requested; second/malliavin need u2."""
    states = simulate_state(model, x0, grid, noise)
    u1 = np.asarray(u1, dtype=float)
    bundle = FlowBundle(states, noise.increments, grid, np.asarray(x0, dtype=float), u1)
    bundle.var1 = simulate_variation1(model, states, u1, grid)
    if u2 is None:
        if second or malliavin:
            raise InvalidInput("second variation and Malliavin flows need a direction u2")
        return bundle
    bundle.u2 = np.asarray(u2, dtype=float)
    bundle.var2 = simulate_variation1(model, states, bundle.u2, grid)
    if second:
        bundle.var11_22 = simulate_variation2(model, states, bundle.var1, bundle.var2, grid)
    if malliavin:
        bundle.malliavin = simulate_malliavin(model, states, bundle.var1, bundle.var2,
                                              grid, grid.horizon)
        bundle.malliavin_horizon = grid.horizon
    return bundle


# ── Diagnostics ──────────────────────────────────────────────────────────────
@dataclass
class DVCheck:
    terminal: float
    interior: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.terminal <= self.tolerance and self.interior <= self.tolerance

    def as_dict(self) -> dict:
        return {"check": "dv_equals_variation", "lhs": self.terminal, "rhs": 0.0,
                "se": 0.0, "interior": self.interior, "pass": self.passed}


def verify_dv_equals_variation(model: DriftModel, x0, grid: TimeGrid,
                               noise: BrownianPath, u) -> DVCheck:
    """Integrate D_V X from its own ODE, forcing sqrt(2) v(s) with
    v(s) = var1(s) / (sqrt(2) t), and compare with the first variation."""
    states = simulate_state(model, x0, grid, noise)
    var1 = simulate_variation1(model, states, u, grid)
    t = grid.horizon
    dv = _integrate_forced(model, states, grid, np.zeros_like(states[:, 0]), var1 / t)
    mid = grid.steps // 2
    s = grid.times[mid]
    terminal = float(np.max(np.linalg.norm(dv[:, -1] - var1[:, -1], axis=-1)))
    interior = float(np.max(np.linalg.norm(dv[:, mid] - (s / t) * var1[:, mid], axis=-1)))
    return DVCheck(terminal, interior, 5 * grid.dt)


def propagator(model: DriftModel, states: np.ndarray, grid: TimeGrid,
               start: int, stop: int) -> np.ndarray:
    """Jacobian flow matrices J_{s,t} between two grid nodes, shape (n, d, d)."""
    n, _, d = states.shape
    sub = TimeGrid(max(stop - start, 1) * grid.dt, max(stop - start, 1))
    cols = []
    for i in range(d):
        e = np.zeros((n, d))
        e[:, i] = 1.0
        cols.append(_integrate_forced(model, states[:, start: stop + 1], sub, e)[:, -1])
    return np.stack(cols, axis=-1)


def verify_flow_composition(model: DriftModel, states: np.ndarray, grid: TimeGrid,
                            split: int) -> float:
    """max |J_{s,t} J_{0,s} - J_{0,t}| over replicas for s at node split."""
    m = grid.steps
    j0s = propagator(model, states, grid, 0, split)
    jst = propagator(model, states, grid, split, m)
    j0t = propagator(model, states, grid, 0, m)
    return float(np.max(np.abs(jst @ j0s - j0t)))


def variation_bound_check(bundle: FlowBundle, theta: ThetaParams) -> dict:
    """Per-path check |var1(t)| <= e^{-theta0 t}|u1| (1 + 10 dt)."""
    t = bundle.grid.times
    lhs = np.linalg.norm(bundle.var1, axis=-1)
    u_norm = np.linalg.norm(np.broadcast_to(bundle.u1, bundle.var1[:, 0].shape), axis=-1)
    rhs = np.exp(-theta.theta0 * t)[None, :] * u_norm[:, None] * (1 + DISC_TOL_FACTOR * bundle.grid.dt)
    ok = np.all(lhs <= rhs + 1e-15, axis=1)
    return {"check": "variation_bound", "paths": int(ok.size),
            "fraction_pass": float(ok.mean()), "worst_ratio": float(np.max(lhs / np.maximum(rhs, 1e-300))),
            "pass": bool(ok.all())}


def second_moment_bound(model: DriftModel, theta: ThetaParams, x0, t: float) -> float:
    """e^{-theta0 t}|x|^2 + (2d + |g(0)|^2/theta0)/theta0."""
    x0 = np.asarray(x0, dtype=float)
    g0 = model.drift(np.zeros((1, model.dim)))[0]
    th = theta.theta0
    return float(np.exp(-th * t) * x0 @ x0 + (2 * model.dim + g0 @ g0 / th) / th)


def refinement_error(model: DriftModel, x0, grid: TimeGrid, noise: BrownianPath) -> float:
    """RMS of X_T on `grid` minus X_T on grid.refine(), driven by the refined
    version of the same Brownian path."""
    fine = BrownianPath(noise.seed, grid.refine(), noise.dim, noise.replicas, noise.start,
                        noise.stream)
    coarse_end = simulate_state(model, x0, grid, noise)[:, -1]
    fine_end = simulate_state(model, x0, fine.grid, fine)[:, -1]
    return float(np.sqrt(np.mean(np.sum((coarse_end - fine_end) ** 2, axis=-1))))


def refinement_check(model: DriftModel, x0, horizon: float = 1.0, steps=(25, 50, 100),
                     replicas: int = 2000, seed: int = 0, stream: int = 0) -> dict:
    """Strong order of the Euler state: halving dt must shrink the terminal
    change at least linearly (fitted order >= 0.75)."""
    errors, dts = [], []
    for m in steps:
        grid = TimeGrid(horizon, m)
        errors.append(refinement_error(model, x0, grid, BrownianPath(seed, grid, model.dim,
                                                                      replicas, stream=stream)))
        dts.append(grid.dt)
    fit = fit_exponent(dts, errors)
    log.debug(f"refinement rms {errors} -> order {fit.exponent:.3f}")
    return {"check": "step_refinement", "dt": dts, "rms": errors, "order": fit.exponent,
            "pass": bool(fit.exponent >= 0.75)}


def seed_determinism_check(model: DriftModel, x0, grid: TimeGrid, seed: int, u1, u2,
                           replicas: int = 200, stream: int = 0) -> dict:
    """Two runs from the same seed must agree bit for bit in every flow."""
    runs = [simulate_flows(model, x0, grid, BrownianPath(seed, grid, model.dim, replicas,
                                                         stream=stream),
                           u1, u2, second=True, malliavin=True) for _ in range(2)]
    names = ("increments", "state", "var1", "var2", "var11_22", "malliavin")
    same = {n: bool(np.array_equal(getattr(runs[0], n), getattr(runs[1], n))) for n in names}
    return {"check": "seed_determinism", "arrays": same, "pass": all(same.values())}
