"""
reports.py - CSV/JSON artifact writers.
Every file carries the sha256 of the resolved run config; every CSV carries a
schema_version column so plotting scripts can detect layout changes.
"""
import hashlib
import json
import logging
import os

import numpy as np
import pandas as pd

from config import CSV_SCHEMA_VERSION, OUTPUT_DIR

log = logging.getLogger(__name__)

HASH_PREFIX = "# config_sha256="
RESOLVED_NAME = "resolved.cfg"
ERROR_NAME = "error.json"


# ────────────────────────────────────────────────────────────────────────────
# HELPERS
# ────────────────────────────────────────────────────────────────────────────
def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_dir(out: str | None = None) -> str:
    path = out or OUTPUT_DIR
    os.makedirs(path, exist_ok=True)
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if np.isfinite(value) else None
    return obj


# ────────────────────────────────────────────────────────────────────────────
# WRITERS
# ────────────────────────────────────────────────────────────────────────────
def write_csv(frame: pd.DataFrame, path: str, cfg_hash: str) -> str:
    frame = frame.copy()
    frame["schema_version"] = CSV_SCHEMA_VERSION
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"{HASH_PREFIX}{cfg_hash}\n")
        frame.to_csv(fh, index=False, lineterminator="\n")
    log.info(f"wrote {path} ({len(frame)} rows)")
    return path


def write_json(payload: dict, path: str, cfg_hash: str) -> str:
    body = {"config_sha256": cfg_hash, **_jsonable(payload)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info(f"wrote {path}")
    return path


def write_resolved(text: str, out: str) -> str:
    path = os.path.join(out, RESOLVED_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def write_error(out: str, exc: BaseException, cfg_hash: str = "") -> str:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if hasattr(exc, "step"):
        payload["step"] = exc.step
    return write_json(payload, os.path.join(out, ERROR_NAME), cfg_hash)


def replica_frame(bundle, replica: int) -> pd.DataFrame:
    """One replica of a FlowBundle: step, t, then X and every tracked flow by component."""
    times = bundle.grid.times
    cols = {"step": np.arange(len(times)), "t": times}
    for name in ("state", "var1", "var2", "var11_22", "malliavin"):
        arr = getattr(bundle, name)
        if arr is None:
            continue
        for i in range(arr.shape[-1]):
            cols[f"{name}_{i}"] = arr[replica, :, i]
    return pd.DataFrame(cols)


# ────────────────────────────────────────────────────────────────────────────
# READERS
# ────────────────────────────────────────────────────────────────────────────
def read_csv(path: str) -> tuple[str, pd.DataFrame]:
    """(config hash, frame) of a file written by write_csv."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith(HASH_PREFIX):
            raise ValueError(f"{path} has no config hash header")
        frame = pd.read_csv(fh)
    return first[len(HASH_PREFIX):], frame
