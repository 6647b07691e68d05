import numpy as np
import pytest
import yaml

import utils.logging
from utils.errors import IoError
from utils.logging import log_stage, shorten_text, stage_record
from utils.reporting import RunArtifacts, emit_report, format_value, policy_header


@pytest.mark.parametrize("value, expected", [
    (0.1, "0.10000000000000001"),
    (np.float64(2.5), "2.5"),
    (float("nan"), "nan"),
    (float("inf"), "inf"),
    (True, "true"),
    (np.bool_(False), "false"),
    (np.int64(7), "7"),
    ("pass", "pass"),
])
def test_format_value(value, expected):
    assert format_value(value) == expected


def test_emit_report_writes_tables_summary_and_manifest(tmp_path):
    config = {"problem": {"name": "lqg", "params": {"a": 0.0}}, "monte_carlo": {"paths": 10, "seed": 3}}
    artifacts = RunArtifacts(config)
    artifacts.add_table("moments.csv", [["sup_x4", 1.5, 0.25]])
    artifacts.add_table("policy.csv", [["initial", 0.0, 1.0]], policy_header(2))
    artifacts.summary.update({"J": 0.1, "passed": True, "paths": 10})

    written = emit_report(tmp_path / "out", artifacts)

    assert [p.name for p in written] == ["moments.csv", "policy.csv", "summary.txt", "manifest.yaml"]
    out = tmp_path / "out"
    assert (out / "moments.csv").read_text(encoding="utf-8") == "statistic,estimate,se\nsup_x4,1.5,0.25\n"
    assert (out / "policy.csv").read_text(encoding="utf-8").splitlines()[0] == "label,theta_0,theta_1"
    assert (out / "summary.txt").read_text(encoding="utf-8") == "J=0.10000000000000001\npassed=true\npaths=10\n"
    assert yaml.safe_load((out / "manifest.yaml").read_text(encoding="utf-8")) == config


def test_unknown_table_needs_a_header():
    with pytest.raises(KeyError):
        RunArtifacts({}).add_table("custom.csv", [[1]])


def test_unwritable_destination_raises_io_error(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("", encoding="utf-8")
    with pytest.raises(IoError):
        emit_report(blocker / "out", RunArtifacts({}))


def test_shorten_text():
    assert shorten_text("  a\nb  ") == "a b"
    assert shorten_text("x" * 10, limit=4) == "xxxx…"


def test_log_stage_appends_markdown():
    log_stage("solve", {"paths": 5}, {"J": 1.0})
    log_stage("verify", {}, "ok")
    text = utils.logging.RUN_LOG_PATH.read_text(encoding="utf-8")
    assert text.count("\n---\n") == 2
    assert "**Run:** `paths=5`" in text
    assert "| J | 1 |" in text
    assert "**Outcome:** ok" in text


def test_stage_record_marks_checks_and_non_finite_values():
    record = stage_record("verify", {"seed": 3}, {"convexity": True, "gradient_check": False,
                                                  "J": np.float64(1.23456789), "J_se": float("nan")}, "now")
    assert record.startswith("### now · verify\n")
    assert "**Failed:** gradient_check" in record
    assert "| convexity | ✅ pass |" in record
    assert "| J | 1.23457 |" in record
    assert "| J_se | ⚠️ nan |" in record
