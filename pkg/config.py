"""
config.py - Central configuration for the Stein/Langevin lab.
Defaults are read from the environment (.env supported); every value can be
overridden per run through the CLI config file or flags.
"""
import os
from dotenv import load_dotenv

load_dotenv()

BASE_DIR = os.path.dirname(os.path.abspath(__file__))

# ── Run defaults ─────────────────────────────────────────────────────────────
DEFAULT_SEED: int = int(os.getenv("STEIN_LAB_SEED", "42"))
WORKERS: int = int(os.getenv("STEIN_LAB_WORKERS", "1"))
LOG_LEVEL: str = os.getenv("STEIN_LAB_LOG_LEVEL", "INFO").upper()

# ── Output (CSV / JSON artifacts) ────────────────────────────────────────────
OUTPUT_DIR = os.getenv("STEIN_LAB_OUT", os.path.join(BASE_DIR, "runs"))
CSV_SCHEMA_VERSION = 1

# ── Noise generation ─────────────────────────────────────────────────────────
# Replicas per counter-keyed noise block. Changing it changes every stream.
NOISE_BLOCK: int = int(os.getenv("STEIN_LAB_BLOCK", "1024"))

# ── Path simulation ──────────────────────────────────────────────────────────
DIVERGENCE_THRESHOLD = 1e6
DISC_TOL_FACTOR = 10.0          # per-path bound slack is 1 + DISC_TOL_FACTOR * dt
MIN_WEIGHT_STEPS = 4            # Bismut weights need t >= 4 dt

# ── Assumption probes ────────────────────────────────────────────────────────
PROBE_TOL = 1e-9
PROBE_RADIUS = 10.0
PROBE_POINTS = 41
KAPPA_PAIRS = 10_000
KAPPA_RADII = 200

# ── Stein estimators ─────────────────────────────────────────────────────────
TAU_NODES = 32                  # t = tau^2 nodes on (0, 1]
CACHE_NODES = {1: 33, 2: 13, 3: 7}
CACHE_STD_SPAN = 4.0
ERGODIC_DT = 1e-2
ERGODIC_CHAINS = 256
ERGODIC_BATCHES = 20
HERMITE_NODES = {1: 80, 2: 40, 3: 30}

# ── Exchangeable pairs / experiments ─────────────────────────────────────────
BURN_IN_FACTOR = 20.0           # ULA burn-in: BURN_IN_FACTOR / (theta0 * s) steps
GEWEKE_Z = 4.0
OT_SUPPORT_CAP = 5000
N_SAMPLES = 4000
N_SEEDS = 5
