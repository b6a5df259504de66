import json
import subprocess
import sys

import pytest

from pdprune.cli import build_parser, main, resolve_config


def _run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def test_analyze_search_pipeline_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run(out, "analyze") == 0
        assert _run(out, "search", "--oracle") == 0
    for name in ("analysis.json", "plan.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    plan = json.loads((a / "plan.json").read_text())
    assert plan["oracle_match"] is True
    assert plan["iterations"] == 36
    assert "prune(7)" in capsys.readouterr().out


def test_search_without_analysis_fails(tmp_path):
    assert _run(tmp_path, "search") == 1


def test_bad_arguments_exit_2(tmp_path):
    assert _run(tmp_path, "analyze", "--k", "0") == 2
    assert _run(tmp_path, "search", "--schedule", "1,2") == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


def test_missing_model_exits_1(tmp_path):
    assert _run(tmp_path, "analyze", "--model", str(tmp_path / "missing.pdtk")) == 1


def test_distill_and_kv_select(tmp_path):
    assert _run(tmp_path, "analyze") == 0
    assert _run(tmp_path, "distill", "--pair", "3,4", "--steps", "5") == 0
    report = json.loads((tmp_path / "distill.json").read_text())
    assert report["pairs"][0]["pair"] == [3, 4]
    assert (tmp_path / "distilled.pdtk").exists()
    assert _run(tmp_path, "kv-select", "--p", "0.25", "--gamma", "0.55", "--n", "2") == 0
    kvplan = json.loads((tmp_path / "kvplan.json").read_text())
    assert len(kvplan["selected_layers"]) == 2


def test_simulate_matches_oracle(tmp_path):
    assert _run(tmp_path, "simulate", "--scenario", "toy-staged", "--check-oracle") == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["transcripts_equal"] is True


def test_bandwidth_report(tmp_path, capsys):
    assert _run(tmp_path, "bandwidth", "--json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["bytes_full"] == 4294967296
    assert 4.9 <= doc["ratio"] <= 5.1 and doc["calibrated"] is True
    assert _run(tmp_path, "bandwidth", "--n", "0", "--no-block-pruning") == 0
    assert json.loads((tmp_path / "bandwidth.json").read_text())["ratio"] == 1.0


def test_verify_subset(tmp_path):
    assert _run(tmp_path, "verify", "--only", "schedule", "bandwidth") == 0


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 1, "k": 5}))
    parse = lambda *a: resolve_config(build_parser().parse_args(["search", "--config", str(cfg), *a]))  # noqa: E731
    monkeypatch.delenv("PDPRUNE_SEED", raising=False)
    assert parse().seed == 1 and parse().k == 5
    monkeypatch.setenv("PDPRUNE_SEED", "2")
    assert parse().seed == 2
    assert parse("--seed", "3").seed == 3


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "pdprune.cli", "verify", "--only", "schedule", "--json"],
                         capture_output=True, text=True, check=False)
    assert out.returncode == 0, out.stderr
    assert json.loads(out.stdout)["checks"][0]["passed"] is True
