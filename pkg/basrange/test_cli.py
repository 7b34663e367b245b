#!/usr/bin/env python3
"""
Tests for the basrange command line
"""

import json

from .cli import EXIT_CONFIG, EXIT_OK, main


def test_run_writes_all_outputs(tmp_path, capsys):
    assert main(["run", "lab-default", "--duration", "20", "--out", str(tmp_path)]) == EXIT_OK
    for name in ("trace.jsonl", "report.json", "summary.txt"):
        assert (tmp_path / name).is_file()
    report = json.loads((tmp_path / "report.json").read_text(encoding='utf-8'))
    assert report['scenario'] == "lab-default"
    assert report['duration_s'] == 20
    first = json.loads((tmp_path / "trace.jsonl").read_text(encoding='utf-8').splitlines()[0])
    assert first['id'] == 0
    assert "Scenario: lab-default" in capsys.readouterr().out


def test_run_is_byte_reproducible(tmp_path):
    """Same scenario and seed give identical trace and report bytes"""
    for out in ("a", "b"):
        assert main(["run", "rtsp-dos", "--duration", "30", "--seed", "11", "--out", str(tmp_path / out)]) == EXIT_OK
    for name in ("trace.jsonl", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_json_output(tmp_path, capsys):
    assert main(["run", "mqtt-recon", "--out", str(tmp_path), "--format", "json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report['steps'][0]['outcome'] == "ACHIEVED"


def test_missing_scenario_is_a_configuration_error(tmp_path, capsys):
    assert main(["run", "no-such-scenario", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "no such file" in capsys.readouterr().err
    assert not (tmp_path / "report.json").exists()


def test_plan_json(capsys):
    argv = ["plan", "--topology", "reference", "--vulndb", "reference-vulndb",
            "--entry", "PUBLIC_IOT", "--target", "plc-1"]
    assert main(argv) == EXIT_OK
    paths = json.loads(capsys.readouterr().out)
    assert [p['devices'] for p in paths] == [["cam-pub", "ws-mgmt", "plc-1"]]
    assert paths[0]['hops'][-1]['tactics'] == ["LATERAL_MOVEMENT_II", "EXECUTION", "PERSISTENCE"]


def test_plan_text_and_unknown_target(capsys):
    assert main(["plan", "--target", "ac-plc", "--format", "text"]) == EXIT_OK
    assert "PUBLIC_IOT: camera [INITIAL_ACCESS]" in capsys.readouterr().out
    assert main(["plan", "--target", "ghost"]) == EXIT_CONFIG
    assert "unknown target device ghost" in capsys.readouterr().err


def test_stats_flags_discrepancy(capsys):
    assert main(["stats"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "⚠️ all building automation devices: 9103/22902 = 39.7% (reported 39.3%)" in out
    assert "IP cameras: 10312/11269 = 91.5% (reported 91.5%)" in out
