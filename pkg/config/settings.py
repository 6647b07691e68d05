"""
Process-level settings for the partially observed FBSDE control solver.

This module loads environment variables and defines constants for:
- Path-parallel execution (worker count, chunk size)
- Regression conditioning (ridge scale)
- Measure-change safeguards (density denominator floor)
- Report formatting and output locations

Run-specific parameters (problem, grid, Monte Carlo budget, optimizer) are
managed through the YAML run configuration.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv(override=True)

# Path-parallel execution
DEFAULT_WORKERS = int(os.getenv("FBSDE_WORKERS", "1"))
CHUNK_PATHS = int(os.getenv("FBSDE_CHUNK_PATHS", "4096"))

# Regression conditioning: lambda = scale * trace(X'X) / feature_count
RIDGE_SCALE = float(os.getenv("FBSDE_RIDGE_SCALE", "1e-8"))

# Controlled-measure conditioning: smallest usable mean density and effective
# sample fraction of the density weights
DENSITY_FLOOR = float(os.getenv("FBSDE_DENSITY_FLOOR", "1e-12"))
MIN_EFFECTIVE_FRACTION = float(os.getenv("FBSDE_MIN_EFFECTIVE_FRACTION", "0.01"))

# Reports
FLOAT_DIGITS = int(os.getenv("FBSDE_FLOAT_DIGITS", "17"))
OUTPUT_ROOT = Path(os.getenv("FBSDE_OUTPUT_DIR", "runs"))
RUN_LOG_PATH = Path(os.getenv("FBSDE_RUN_LOG", str(OUTPUT_ROOT / "run-log.md")))

# Shipped run configurations
CONFIG_DIR = Path(__file__).parent
DEFAULT_CONFIG_PATH = CONFIG_DIR / "lqg_benchmark.yaml"

# Progress bars go to stderr and never touch the artifacts
SHOW_PROGRESS = os.getenv("FBSDE_SHOW_PROGRESS", "false").lower() in ("1", "true", "yes")


def print_settings() -> None:
    """
    Print diagnostic information about the resolved settings.

    Useful for checking that environment overrides were picked up before
    launching a long Monte Carlo run.
    """
    print(f"🧵 Workers                : {DEFAULT_WORKERS}")
    print(f"📦 Chunk paths            : {CHUNK_PATHS}")
    print(f"📐 Ridge scale            : {RIDGE_SCALE}")
    print(f"🛡️ Density floor          : {DENSITY_FLOOR} (min effective fraction {MIN_EFFECTIVE_FRACTION})")
    print(f"🗂️ Output root            : {OUTPUT_ROOT}")
    print(f"📝 Run log                : {RUN_LOG_PATH}")
