#!/usr/bin/env python3
"""
Tests for scenario/settings loading and the error paths they report
"""

import json

import pytest

from .attacks import parse_step_params
from .config import DATA_DIR, load_settings
from .errors import ConfigurationError
from .scenario import (AttackReport, StepKind, Vantage, dump_scenario, load_scenario, load_scenario_file,
                       report_json, resolve_scenario)

BUNDLED = sorted(p.stem for p in (DATA_DIR / "scenarios").glob("*.json"))


def scenario_text(**overrides):
    data = {'name': "t", 'topology': "lab", 'duration_s': 30,
            'steps': [{'kind': "RTSP_DROP_REQUEST", 'params': {'method': "SETUP"}, 't_start': 0, 't_stop': 10}]}
    data.update(overrides)
    return json.dumps(data)


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_load_and_resolve(name):
    scenario, base_dir = load_scenario_file(name)
    topology, _ = resolve_scenario(scenario, base_dir)
    assert topology.has_device(scenario.attacker) or not scenario.steps
    for i, step in enumerate(scenario.steps):
        parse_step_params(step, i)


def test_load_by_name_and_by_path():
    by_name, _ = load_scenario_file("rtsp-dos")
    by_path, _ = load_scenario_file(DATA_DIR / "scenarios" / "rtsp-dos.json")
    assert by_name == by_path
    assert by_name.steps[0].kind == StepKind.RTSP_DROP_REQUEST
    assert by_name.vantage == Vantage(taps=["cam-nvr"])


def test_dump_then_load_is_stable():
    scenario, _ = load_scenario_file("hue-attacks")
    assert load_scenario(dump_scenario(scenario)) == scenario


def test_missing_file():
    with pytest.raises(ConfigurationError, match="no such file"):
        load_scenario_file("does-not-exist")


def test_invalid_json():
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        load_scenario("{", "broken.json")


def test_unknown_step_kind_names_the_path():
    text = scenario_text(steps=[{'kind': "LASER", 't_start': 0}])
    with pytest.raises(ConfigurationError, match=r"steps\[0\]\.kind"):
        load_scenario(text)


def test_unknown_field_rejected():
    with pytest.raises(ConfigurationError, match="colour"):
        load_scenario(scenario_text(colour="red"))


def test_step_window_must_be_ordered():
    text = scenario_text(steps=[{'kind': "RTP_DROP", 't_start': 10, 't_stop': 5}])
    with pytest.raises(ConfigurationError, match="t_stop"):
        load_scenario(text)


def test_bad_step_params_name_the_path():
    scenario = load_scenario(scenario_text(steps=[{'kind': "RTP_DROP", 'params': {'fraction': "lots"}}]))
    with pytest.raises(ConfigurationError, match=r"steps\[0\]\.params\.fraction"):
        parse_step_params(scenario.steps[0], 0)


@pytest.mark.parametrize("overrides, message", [
    ({'vantage': {'taps': ["nope"]}}, r"vantage\.taps\[0\]: unknown link id nope"),
    ({'vantage': {'reach': ["ghost"]}}, r"vantage\.reach\[0\]: unknown device id ghost"),
    ({'steps': [{'kind': "RTP_DROP", 't_start': 99}]}, r"steps\[0\]\.t_start"),
    ({'settings': {'radio': {}}}, r"settings\.radio"),
])
def test_reference_errors(overrides, message):
    scenario = load_scenario(scenario_text(**overrides))
    with pytest.raises(ConfigurationError, match=message):
        resolve_scenario(scenario)


def test_scenario_settings_override_defaults():
    scenario = load_scenario(scenario_text(settings={'rtsp': {'timeout_s': 30}}))
    _, settings = resolve_scenario(scenario)
    assert settings.rtsp.timeout_s == 30
    assert settings.rtsp.retry_interval_s == 2.0


def test_settings_file(tmp_path):
    path = tmp_path / "settings.json"
    path.write_text(json.dumps({'mqtt': {'capacity': 500}}), encoding='utf-8')
    assert load_settings(str(path)).mqtt.capacity == 500
    path.write_text(json.dumps({'rtsp': {'bogus': 1}}), encoding='utf-8')
    with pytest.raises(ConfigurationError, match=r"settings\.rtsp\.bogus"):
        load_settings(str(path))
    with pytest.raises(ConfigurationError, match="cannot read settings file"):
        load_settings(str(tmp_path / "missing.json"))


def test_report_json_is_sorted_and_newline_terminated():
    text = report_json(AttackReport(scenario="s", seed=1, duration_s=2.0))
    assert text.endswith("}\n")
    assert list(json.loads(text)) == sorted(json.loads(text))
