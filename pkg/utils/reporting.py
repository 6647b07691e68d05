"""
Run artifacts: fixed-schema CSV tables, a key=value summary and a manifest.

Floats are written with FLOAT_DIGITS significant digits so identical runs
produce identical bytes.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from config.settings import FLOAT_DIGITS
from utils.errors import IoError

SCHEMAS = {
    "gradient_report.csv": ["iter", "J", "J_se", "grad_norm", "residual", "step", "seed"],
    "verify_report.csv": ["check", "statistic", "tolerance", "pass", "seed"],
    "density_check.csv": ["step", "t", "mean", "se", "z"],
    "moments.csv": ["statistic", "estimate", "se"],
    "oracle_curves.csv": ["t", "P", "Sigma", "G"],
    "adjoint_summary.csv": ["process", "component", "mean", "std"],
}


def format_value(value) -> str:
    """Render one cell; floats use FLOAT_DIGITS significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return format(value, f".{FLOAT_DIGITS}g")
    return str(value)


def policy_header(theta_size: int) -> list[str]:
    return ["label"] + [f"theta_{i}" for i in range(theta_size)]


def path_header(n: int, k: int) -> list[str]:
    return ["path", "step", "t"] + [f"x_{i + 1}" for i in range(n)] + ["Y", "logrho"] + [f"u_{i + 1}" for i in range(k)]


def path_rows(ens) -> list[list]:
    """One row per (path, node); the control at the terminal node is left empty."""
    t = ens.grid.nodes
    k = ens.u.shape[-1]
    rows = []
    for i in range(ens.paths):
        for j in range(ens.grid.N + 1):
            u = list(ens.u[i, j]) if j < ens.grid.N else [""] * k
            rows.append([i, j, t[j], *ens.x[i, j], ens.Y[i, j], ens.log_rho[i, j], *u])
    return rows


@dataclass
class RunArtifacts:
    """Everything a workflow wants written: tables by file name, summary lines and the resolved config."""

    config: dict
    tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    summary: dict[str, object] = field(default_factory=dict)

    def add_table(self, name: str, rows: list[list], header: list[str] | None = None) -> None:
        self.tables[name] = (header or SCHEMAS[name], rows)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def emit_report(out_dir: str | Path, artifacts: RunArtifacts) -> list[Path]:
    """
    Write every table, ``summary.txt`` and ``manifest.yaml`` under out_dir.

    Args:
        out_dir: Output directory (created if needed)
        artifacts: Tables, summary and config to write

    Returns:
        Paths written, in write order

    Raises:
        IoError: A file could not be written
    """
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, (header, rows) in artifacts.tables.items():
            _write_csv(out / name, header, rows)
            written.append(out / name)

        summary_path = out / "summary.txt"
        with open(summary_path, "w", encoding="utf-8") as fh:
            for key, value in artifacts.summary.items():
                fh.write(f"{key}={format_value(value)}\n")
        written.append(summary_path)

        manifest_path = out / "manifest.yaml"
        with open(manifest_path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(artifacts.config, fh, sort_keys=True, default_flow_style=False)
        written.append(manifest_path)
    except OSError as e:
        raise IoError(f"could not write report to {out}: {e}") from e

    print(f"🗂️ Wrote {len(written)} files to {out}")
    return written
