"""
cli.py - Command-line front end for the lab.
Run: python cli.py <command> [--config run.cfg] [--seed N] [--workers N] [--out DIR] [--key value ...]

Run configs are flat `key = value` files with dotted keys (model.kind, grid.T).
Flags override the file. Each run writes resolved.cfg next to its CSV/JSON
outputs; every output embeds the sha256 of resolved.cfg.

Exit status: 0 when every asserted check passes, 1 when a check fails,
2 on rejected input or a module error (error.json is written).
"""
import argparse
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from dotenv import dotenv_values

from config import DEFAULT_SEED, LOG_LEVEL, N_SAMPLES, N_SEEDS, OT_SUPPORT_CAP, OUTPUT_DIR, WORKERS
from errors import ConfigError, LabError

log = logging.getLogger("stein_lab")

COMMANDS = ("probe", "simulate", "bismut-check", "stein-solve", "residual", "pair-bound",
            "ula-scaling", "clt-rate", "contraction", "lemma-suite")
MAX_STEP = 1.0 / np.e


# ────────────────────────────────────────────────────────────────────────────
# VALUE PARSERS
# ────────────────────────────────────────────────────────────────────────────
def _int(text: str) -> int:
    return int(str(text).strip())


def _float(text: str) -> float:
    return float(str(text).strip())


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _matrix(text: str) -> str:
    text = str(text).strip()
    if text == "identity":
        return text
    rows = [_floats(r) for r in text.split(";")]
    if len({len(r) for r in rows}) != 1:
        raise ValueError("matrix rows differ in length")
    return ";".join(",".join(repr(v) for v in r) for r in rows)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = str(text).strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


# ────────────────────────────────────────────────────────────────────────────
# SCHEMA
# ────────────────────────────────────────────────────────────────────────────
def _check_steps(steps: tuple) -> str | None:
    if not steps or any(not 0 < s < MAX_STEP for s in steps):
        return "step must satisfy s < 1/e (and s > 0)"
    return None


# key -> (parser, default, check returning an error message or None)
SCHEMA: dict[str, tuple[Callable, Any, Callable | None]] = {
    "command":          (_choice(*COMMANDS), None, None),
    "seed":             (_int, DEFAULT_SEED, lambda v: None if 0 <= v < 2 ** 64 else "seed must be a 64-bit unsigned integer"),
    "workers":          (_int, WORKERS, lambda v: None if v >= 1 else "workers must be >= 1"),
    "out":              (str, OUTPUT_DIR, None),
    "model.kind":       (_choice("linear", "power", "counterexample"), "linear", None),
    "model.d":          (_int, 1, lambda v: None if 1 <= v <= 3 else "model.d must lie in [1, 3]"),
    "model.A":          (_matrix, "identity", None),
    "model.c":          (_float, 1.0, lambda v: None if v > 0 else "model.c must be > 0"),
    "model.p":          (_float, 2.0, lambda v: None if v >= 0 else "model.p must be >= 0"),
    "contraction.mode": (_choice("auto", "analytic", "probed"), "auto", None),
    "grid.dt":          (_float, 1e-2, lambda v: None if 0 < v <= 0.1 else "grid.dt must lie in (0, 0.1]"),
    "grid.T":           (_float, 10.0, lambda v: None if v > 0 else "grid.T must be > 0"),
    "point.x":          (_floats, (0.0,), None),
    "dir.u1":           (_floats, (1.0,), None),
    "dir.u2":           (_floats, (1.0,), None),
    "h":                (_choice("x", "x2", "square", "abs", "sin", "const"), "x", None),
    "stein.order":      (_choice("value", "grad", "hess"), "grad", None),
    "mc.replicas":      (_int, 10_000, lambda v: None if v >= 1 else "mc.replicas must be >= 1"),
    "weight.t":         (_float, 1.0, lambda v: None if v > 0 else "weight.t must be > 0"),
    "fd.eps":           (_float, 1e-3, lambda v: None if 1e-4 <= v <= 1e-2 else "fd.eps must lie in [1e-4, 1e-2]"),
    "step":             (_floats, (0.2, 0.1, 0.05, 0.025), _check_steps),
    "pair.kind":        (_choice("ula", "clt", "broken"), "ula", None),
    "pair.n":           (_int, 64, lambda v: None if v >= 1 else "pair.n must be >= 1"),
    "clt.dist":         (_choice("rademacher", "bounded_uniform"), "rademacher", None),
    "clt.n_grid":       (_ints, (8, 16, 32, 64, 128), lambda v: None if v and min(v) >= 1 else "clt.n_grid must be positive"),
    "samples":          (_int, N_SAMPLES, lambda v: None if 1 <= v <= OT_SUPPORT_CAP else f"samples must lie in [1, {OT_SUPPORT_CAP}]"),
    "seeds":            (_int, N_SEEDS, lambda v: None if v >= 1 else "seeds must be >= 1"),
    "t_grid":           (_floats, (0.25, 0.5, 1.0, 1.5, 2.0), lambda v: None if v and min(v) > 0 else "t_grid must be positive"),
    "paths.dump":       (_int, 0, lambda v: None if v >= 0 else "paths.dump must be >= 0"),
}

ALIASES = {"model": "model.kind", "d": "model.d", "A": "model.A", "x": "point.x",
           "T": "grid.T", "dt": "grid.dt", "replicas": "mc.replicas", "u1": "dir.u1",
           "u2": "dir.u2"}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def command(self) -> str:
        return self.values["command"]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out(self) -> str:
        return self.values["out"]


def _canonical(key: str) -> str:
    key = key.strip()
    key = ALIASES.get(key, key)
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key '{key}'")
    return key


def _parse_value(key: str, raw) -> Any:
    parser, _, check = SCHEMA[key]
    try:
        value = parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for '{key}': {raw!r} ({exc})") from exc
    message = check(value) if check else None
    if message:
        raise ConfigError(f"{message}; got {key} = {_fmt(value)}")
    return value


def _vector(cfg: dict, key: str, d: int) -> tuple:
    """A scalar point is repeated on every axis; a scalar direction is padded with zeros."""
    v = cfg[key]
    if len(v) == 1 and d > 1:
        v = v * d if key == "point.x" else v + (0.0,) * (d - 1)
    if len(v) != d:
        raise ConfigError(f"'{key}' has {len(v)} components, model.d is {d}")
    return tuple(float(a) for a in v)


def parse_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """File values, then overrides (flag wins), then defaults; validated."""
    raw: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        for k, v in dotenv_values(path).items():
            if v is None:
                raise ConfigError(f"config key '{k}' has no value")
            raw[_canonical(k)] = v
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[_canonical(k)] = v
    if "command" not in raw:
        raise ConfigError("no command given")
    values = {}
    for key, (_, default, _) in SCHEMA.items():
        values[key] = _parse_value(key, raw[key]) if key in raw else default
    d = values["model.d"]
    for key in ("point.x", "dir.u1", "dir.u2"):
        values[key] = _vector(values, key, d)
    if values["command"] == "bismut-check" and values["mc.replicas"] < 1000:
        raise ConfigError("bismut-check needs mc.replicas >= 1000")
    build_model(values)
    return RunConfig(values)


def format_config(cfg: RunConfig) -> str:
    lines = ["# resolved run config"]
    lines += [f"{key} = {_fmt(cfg.values[key])}" for key in SCHEMA]
    return "\n".join(lines) + "\n"


# ────────────────────────────────────────────────────────────────────────────
# MODEL
# ────────────────────────────────────────────────────────────────────────────
def build_model(values: dict):
    from model import make_counterexample_model, make_linear_model, make_power_model
    d, kind = values["model.d"], values["model.kind"]
    if kind == "linear":
        spec = values["model.A"]
        A = np.eye(d) if spec == "identity" else np.array([_floats(r) for r in spec.split(";")])
        if A.shape != (d, d):
            raise ConfigError(f"model.A has shape {A.shape}, model.d is {d}")
        return make_linear_model(A)
    if kind == "power":
        return make_power_model(values["model.c"], values["model.p"], d)
    return make_counterexample_model(values["model.c"], max(values["model.p"], 1e-12), d)


def _contraction(cfg: RunConfig, model):
    from model import contraction_constants
    mode = cfg["contraction.mode"]
    if mode == "auto":
        mode = "analytic" if model.kind == "linear" else "probed"
    return contraction_constants(model, mode, seed=cfg.seed)


# ────────────────────────────────────────────────────────────────────────────
# COMMAND HANDLERS
# ────────────────────────────────────────────────────────────────────────────
HANDLERS: dict[str, Callable] = {}


def command(name: str):
    def register(fn):
        HANDLERS[name] = fn
        return fn
    return register


class Run:
    """Output context of one invocation."""

    def __init__(self, cfg: RunConfig, cfg_hash: str):
        self.cfg, self.hash = cfg, cfg_hash
        self.out = cfg.out

    def csv(self, name: str, frame) -> str:
        from reports import write_csv
        return write_csv(frame, os.path.join(self.out, name), self.hash)

    def json(self, name: str, payload: dict) -> str:
        from reports import write_json
        return write_json(payload, os.path.join(self.out, name), self.hash)


@command("probe")
def cmd_probe(run: Run, model, theta) -> bool:
    from errors import AssumptionViolation
    from model import default_probes, probe_assumption
    report = probe_assumption(model, theta, default_probes(model.dim))
    payload = {"model": model.describe(), "probe": report.as_dict()}
    if report.passed:
        try:
            payload["contraction"] = _contraction(run.cfg, model).as_dict()
        except AssumptionViolation as exc:
            payload["contraction"] = {"error": str(exc)}
    run.json("probe.json", payload)
    return report.passed


@command("simulate")
def cmd_simulate(run: Run, model, theta) -> bool:
    from paths import BrownianPath, TimeGrid, variation_bound_check, simulate_flows
    from reports import replica_frame
    cfg = run.cfg
    grid = TimeGrid.from_dt(cfg["grid.T"], cfg["grid.dt"])
    noise = BrownianPath(cfg.seed, grid, model.dim, cfg["mc.replicas"])
    bundle = simulate_flows(model, cfg["point.x"], grid, noise, cfg["dir.u1"], cfg["dir.u2"],
                            second=True, malliavin=True)
    check = variation_bound_check(bundle, theta)
    dumped = min(cfg["paths.dump"], bundle.replicas)
    for r in range(dumped):
        run.csv(f"paths_{r}.csv", replica_frame(bundle, r))
    run.json("simulate.json", {"model": model.describe(), "replicas": bundle.replicas,
                               "steps": grid.steps, "dumped": dumped, "checks": [check]})
    return check["pass"]


@command("bismut-check")
def cmd_bismut(run: Run, model, theta) -> bool:
    import pandas as pd
    from bismut import verify_bel, verify_ibp, verify_second_order
    from stein import test_function
    cfg = run.cfg
    h = test_function(cfg["h"], model.dim)
    common = dict(dt=cfg["grid.dt"], seed=cfg.seed, workers=cfg["workers"])
    t, n, x0, u1, u2 = cfg["weight.t"], cfg["mc.replicas"], cfg["point.x"], cfg["dir.u1"], cfg["dir.u2"]
    checks = [verify_ibp(model, x0, t, h, u1, n, stream=0, **common),
              verify_bel(model, x0, t, h, u1, n, cfg["fd.eps"], stream=1, **common),
              verify_second_order(model, x0, t, h, u1, u2, n, stream=2, **common)]
    records = [c.as_dict() for c in checks]
    run.csv("bismut_checks.csv", pd.DataFrame(records))
    run.json("bismut_checks.json", {"checks": records})
    return all(c.passed for c in checks)


@command("stein-solve")
def cmd_stein_solve(run: Run, model, theta) -> bool:
    import pandas as pd
    from stein import (build_f_cache, build_grad_cache, default_target, estimate_f,
                       estimate_grad_f, estimate_hess_f, gaussian_oracle, test_function)
    cfg = run.cfg
    h = test_function(cfg["h"], model.dim)
    contraction = _contraction(cfg, model)
    T, n, dt, x = cfg["grid.T"], cfg["mc.replicas"], cfg["grid.dt"], cfg["point.x"]
    common = dict(dt=dt, seed=cfg.seed, contraction=contraction, workers=cfg["workers"])
    target = default_target(model, h, dt, cfg.seed)
    estimates = [estimate_f(model, h, x, T, n, target=target, stream=0, **common)]
    if cfg["stein.order"] in ("grad", "hess"):
        estimates.append(estimate_grad_f(model, h, x, cfg["dir.u1"], T, n, stream=1, **common))
    if cfg["stein.order"] == "hess":
        cache_n = max(n // 4, 1000)
        f_cache = build_f_cache(model, h, T, cache_n, target=target, **common)
        g_cache = build_grad_cache(model, h, T, cache_n, **common)
        estimates.append(estimate_hess_f(model, h, x, cfg["dir.u1"], cfg["dir.u2"], T, n,
                                         g_cache, f_cache, target=target, stream=2, **common))
    rows = [e.as_dict() for e in estimates]
    passed = True
    standard = model.kind == "linear" and np.allclose(model.params["A"], np.eye(model.dim))
    if standard:
        orders = {"f": ("value", None, None), "grad_f": ("grad", cfg["dir.u1"], None),
                  "hess_f": ("hess", cfg["dir.u1"], cfg["dir.u2"])}
        for row, est in zip(rows, estimates):
            order, a, b = orders[est.kind]
            oracle = gaussian_oracle(h, x, order, a, b)
            row["oracle"] = oracle
            row["pass"] = abs(est.value - oracle) <= 3 * est.std_error + est.truncation_tail
            passed &= row["pass"]
    run.csv("stein_solve.csv", pd.DataFrame(rows))
    run.json("stein_solve.json", {"model": model.describe(), "h": h.name,
                                  "target_mean": target.value, "estimates": rows})
    return bool(passed)


@command("residual")
def cmd_residual(run: Run, model, theta) -> bool:
    from stein import stein_residual, test_function
    cfg = run.cfg
    h = test_function(cfg["h"], model.dim)
    res = stein_residual(model, h, cfg["point.x"], cfg["grid.T"], cfg["mc.replicas"],
                         dt=cfg["grid.dt"], seed=cfg.seed,
                         contraction=_contraction(cfg, model), workers=cfg["workers"])
    run.json("residual.json", {**res.as_dict(), "components": res.components})
    return res.passed


def _pair_samples(cfg: RunConfig, model):
    from experiments import reference_sample
    from pair import ula_chain
    if cfg["pair.kind"] == "ula":
        return ula_chain(model, cfg["step"][0], cfg["samples"], cfg.seed)
    return reference_sample(model, cfg["samples"], cfg.seed, 0, cfg["step"][-1] / 16)


@command("pair-bound")
def cmd_pair_bound(run: Run, model, theta) -> bool:
    import pandas as pd
    from experiments import clt_sample
    from model import make_linear_model
    from pair import (bound_terms, broken_pair, clt_pair, exchangeability_check,
                      regress_conditional_structure, ula_pair)
    cfg = run.cfg
    kind, s = cfg["pair.kind"], cfg["step"][0]
    structure = model
    if kind == "ula":
        batch = ula_pair(model, s, _pair_samples(cfg, model), cfg.seed)
    elif kind == "clt":
        shape = (cfg["samples"], cfg["pair.n"], model.dim)
        X = clt_sample(cfg["clt.dist"], shape, cfg.seed, 0)
        Xp = clt_sample(cfg["clt.dist"], shape, cfg.seed, 1)
        batch = clt_pair(X, Xp, cfg.seed)
        structure, _ = make_linear_model(np.eye(model.dim))
    else:
        batch = broken_pair(_pair_samples(cfg, model), s, cfg.seed)
    report = bound_terms(batch)
    checks = [exchangeability_check(batch)]
    if batch.size >= 1000 and batch.dim <= 2:
        checks.append(regress_conditional_structure(batch, structure).as_dict())
    run.csv("pair_bound.csv", pd.DataFrame([report.as_row()]))
    run.json("pair_bound.json", {"bound": report.as_row(), "checks": checks})
    failed = [c["check"] for c in checks if not c["pass"]]
    if failed:
        log.warning(f"pair '{kind}' failed: {', '.join(failed)}")
    return not failed


@command("ula-scaling")
def cmd_ula_scaling(run: Run, model, theta) -> bool:
    from experiments import ula_scaling
    cfg = run.cfg
    result = ula_scaling(model, cfg["step"], cfg["samples"], cfg.seed, seeds=cfg["seeds"],
                         workers=cfg["workers"])
    run.csv("ula_scaling.csv", result.frame)
    run.json("ula_scaling.json", result.as_summary())
    return result.summary["all_dominated"] and result.summary["all_rate_holds"]


@command("clt-rate")
def cmd_clt_rate(run: Run, model, theta) -> bool:
    from experiments import clt_rate
    cfg = run.cfg
    result = clt_rate(cfg["clt.dist"], model.dim, cfg["clt.n_grid"], cfg["samples"], cfg.seed,
                      seeds=cfg["seeds"], workers=cfg["workers"])
    run.csv("clt_rate.csv", result.frame)
    run.json("clt_rate.json", result.as_summary())
    return bool(abs(result.fit.exponent + 0.5) <= 0.1)


@command("contraction")
def cmd_contraction(run: Run, model, theta) -> bool:
    from experiments import contraction_decay
    cfg = run.cfg
    result = contraction_decay(model, cfg["point.x"], cfg["t_grid"], cfg["samples"], cfg.seed,
                               seeds=cfg["seeds"], dt=cfg["grid.dt"],
                               contraction=_contraction(cfg, model), workers=cfg["workers"])
    run.csv("contraction.csv", result.frame)
    run.json("contraction.json", result.as_summary())
    return result.summary["rate_at_least_c"] and result.summary["ergodic_bound_holds"]


@command("lemma-suite")
def cmd_lemma_suite(run: Run, model, theta) -> bool:
    from experiments import lemma_suite
    cfg = run.cfg
    ledger = lemma_suite(model, cfg.seed, theta=theta, workers=cfg["workers"])
    run.csv("ledger.csv", ledger.frame)
    run.json("ledger.json", ledger.as_dict())
    return ledger.passed


# ────────────────────────────────────────────────────────────────────────────
# ENTRY POINT
# ────────────────────────────────────────────────────────────────────────────
def run(cfg: RunConfig) -> int:
    from reports import config_hash, run_dir, write_error, write_resolved
    text = format_config(cfg)
    cfg_hash = config_hash(text)
    out = run_dir(cfg.out)
    write_resolved(text, out)
    log.info(f"{cfg.command}: seed={cfg.seed} out={out} config={cfg_hash[:12]}")
    try:
        model, theta = build_model(cfg.values)
        passed = HANDLERS[cfg.command](Run(cfg, cfg_hash), model, theta)
    except LabError as exc:
        log.error(f"{cfg.command} failed: {exc}")
        write_error(out, exc, cfg_hash)
        return 2
    except Exception as exc:
        log.exception(f"{cfg.command} crashed")
        write_error(out, exc, cfg_hash)
        return 2
    log.info(f"{cfg.command}: {'all checks passed' if passed else 'CHECK FAILED'}")
    return 0 if passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Stein/Langevin lab runner")
    parser.add_argument("command", nargs="?", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value run config")
    parser.add_argument("--seed")
    parser.add_argument("--workers")
    parser.add_argument("--out")
    for key in SCHEMA:
        if key not in ("command", "seed", "workers", "out"):
            parser.add_argument(f"--{key}", dest=key, metavar=key.split(".")[-1].upper())
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stdout,
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    args = vars(build_parser().parse_args(argv))
    path = args.pop("config")
    try:
        cfg = parse_config(path, args)
    except LabError as exc:
        log.error(f"invalid config: {exc}")
        if args.get("out"):
            from reports import run_dir, write_error
            write_error(run_dir(args["out"]), exc)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
