"""
Run log for solver stages.

Each stage appends one markdown record to RUN_LOG_PATH: a heading with the
stage name, the Monte Carlo settings it ran with, and its metrics as a
two-column table. Check outcomes show as pass/fail marks and estimates
that went non-finite are flagged. The log lives outside the run output
directory so reruns produce byte-identical artifacts.
"""

import math
from datetime import datetime

import numpy as np

from config.settings import RUN_LOG_PATH

LOG_DIGITS = 6


def shorten_text(text: str, limit: int = 400) -> str:
    """Collapse newlines and truncate with an ellipsis past ``limit`` characters."""
    s = text.strip().replace("\n", " ")
    return (s[:limit] + "…") if len(s) > limit else s


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "✅ pass" if value else "❌ fail"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return f"{value:.{LOG_DIGITS}g}" if math.isfinite(value) else f"⚠️ {value}"
    return shorten_text(str(value), 120).replace("|", "\\|")


def stage_record(name: str, settings: dict, metrics: str | dict, stamp: str) -> str:
    """
    Render one stage as markdown.

    Args:
        name: Stage name (e.g. "optimize_iteration")
        settings: Seed, path count and similar inputs, shown on one line
        metrics: Stage metrics, or a free-text outcome
        stamp: Timestamp for the heading

    Returns:
        The record, ending in a horizontal rule
    """
    lines = [f"### {stamp} · {name}\n"]
    if settings:
        lines.append("**Run:** " + ", ".join(f"`{k}={_cell(v)}`" for k, v in settings.items()) + "\n")
    if isinstance(metrics, dict):
        failed = [k for k, v in metrics.items() if isinstance(v, (bool, np.bool_)) and not v]
        if failed:
            lines.append(f"**Failed:** {', '.join(failed)}\n")
        lines.append("\n| metric | value |\n|---|---|\n")
        lines.extend(f"| {k} | {_cell(v)} |\n" for k, v in metrics.items())
    else:
        lines.append(f"**Outcome:** {shorten_text(str(metrics), 600)}\n")
    lines.append("\n---\n")
    return "".join(lines)


def log_stage(name: str, settings: dict, metrics: str | dict) -> None:
    """
    Append a stage record to the run log.

    Errors while logging are printed and never interrupt a run.
    """
    try:
        RUN_LOG_PATH.parent.mkdir(parents=True, exist_ok=True)
        record = stage_record(name, settings, metrics, datetime.now().strftime("%Y-%m-%d %H:%M:%S"))
        with open(RUN_LOG_PATH, "a", encoding="utf-8") as lf:
            lf.write(record)
    except Exception as e:
        print(f"[log-error] {e}")
