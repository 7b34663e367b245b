#!/usr/bin/env python3
"""
End-to-end attack scenarios on the lab topology
Each test runs a bundled (or slightly varied) scenario and checks the trace and report.
"""

import pytest

from .attacks import AttackEngine, footage_replay, run_scenario
from .config import Settings
from .devices import build_world
from .errors import ConfigurationError
from .mqtt import ConnackCode
from .scenario import AttackStep, Outcome, Scenario, StepKind, load_scenario_file
from .simnet import Action, InterposerRule, Matcher, seconds

RETRY_S = 2.0


def run_variant(name, **step_updates):
    """Run a bundled scenario with its single step changed"""
    scenario, base_dir = load_scenario_file(name)
    step = scenario.steps[0].model_copy(update=step_updates)
    return run_scenario(scenario.model_copy(update={'steps': [step]}), base_dir)


def setup_length_s(run_bundled):
    _, trace, _ = run_bundled("lab-default")
    return trace.notes("stream_up", "workstation")[0].t_us / 1e6


def stream_ups(trace, until_s=None):
    ups = trace.notes("stream_up", "workstation")
    return [e for e in ups if until_s is None or e.t_us <= seconds(until_s)]


@pytest.mark.parametrize("name", ["rtsp-dos", "rtsp-dos-port", "rtsp-dos-response", "rtsp-dos-status"])
def test_setup_sequence_dos(run_bundled, name):
    """The NVR never gets a stream while the interposer runs and recovers quickly after"""
    _, trace, report = run_bundled(name)
    step = report.steps[0]
    assert step.outcome == Outcome.ACHIEVED, step.reason
    assert stream_ups(trace, until_s=120) == []
    assert step.metrics['recovered_after_s'] is not None
    assert step.metrics['recovered_after_s'] <= 2 * (RETRY_S + setup_length_s(run_bundled))


@pytest.mark.parametrize("method", ["OPTIONS", "DESCRIBE", "PLAY"])
def test_dropping_other_setup_requests(run_bundled, method):
    _, trace, report = run_variant("rtsp-dos", params={'method': method})
    step = report.steps[0]
    assert step.outcome == Outcome.ACHIEVED, step.reason
    assert stream_ups(trace, until_s=120) == []
    assert step.metrics['recovered_after_s'] <= 2 * (RETRY_S + setup_length_s(run_bundled))


def test_status_tamper_keeps_client_out_of_playing(run_bundled):
    _, trace, _ = run_bundled("rtsp-dos-status")
    states = [e.detail['to'] for e in trace.states("workstation", "rtsp-client") if e.t_us <= seconds(120)]
    assert "PLAYING" not in states
    assert "AUTH_PENDING" in states


def test_port_tamper_reaches_protocol_playing_without_media(run_bundled):
    _, trace, report = run_bundled("rtsp-dos-port")
    camera_states = [e.detail['to'] for e in trace.states("camera", "rtsp-server") if e.t_us <= seconds(120)]
    assert "PLAYING" in camera_states
    restarts = [e for e in trace.notes("restart", "workstation") if e.detail['reason'] == "no media"]
    assert restarts
    assert report.steps[0].metrics['frames_hit'] > 0


def test_drop_keepalive_terminates_and_resets_up(run_bundled):
    _, trace, report = run_bundled("keepalive-drop")
    step = report.steps[0]
    assert step.outcome == Outcome.ACHIEVED, step.reason
    assert step.metrics['resetups'] >= 1
    assert step.metrics['termination_after_first_drop_s'] <= 60


def test_keepalive_drop_reduces_availability(run_bundled):
    _, _, baseline = run_bundled("lab-default")
    _, _, attacked = run_bundled("keepalive-drop")
    assert attacked.availability < baseline.availability


def test_keepalive_replaced_with_describe(run_bundled):
    _, trace, report = run_bundled("keepalive-describe")
    step = report.steps[0]
    assert step.outcome == Outcome.ACHIEVED, step.reason
    assert step.metrics['status_455'] >= 1 and step.metrics['client_teardowns'] >= 1


def test_keepalive_replaced_with_teardown(run_bundled):
    _, trace, report = run_bundled("keepalive-teardown")
    step = report.steps[0]
    assert step.outcome == Outcome.ACHIEVED, step.reason
    assert step.metrics['termination_delay_s'] < 1
    ends = [e for e in trace.states("camera", "rtsp-server") if e.detail['to'] == "TERMINATED"]
    assert ends[0].detail['reason'] == "TEARDOWN"


@pytest.mark.parametrize("name, status", [
    ("rtp-flood-frozen", "FROZEN"),
    ("rtp-flood-foreign", "FOREIGN"),
    ("rtp-flood-corrupted", "CORRUPTED"),
])
def test_rtp_flood_trichotomy(run_bundled, name, status):
    _, trace, report = run_bundled(name)
    assert report.steps[-1].outcome == Outcome.ACHIEVED
    windows = [e.detail['status'] for e in trace.notes("render", "workstation")
               if seconds(12) <= e.t_us <= seconds(30)]
    assert windows and set(windows) == {status}


def test_footage_replay_shows_stale_frames(run_bundled):
    _, _, report = run_bundled("footage-replay")
    step = report.steps[0]
    assert step.outcome == Outcome.ACHIEVED, step.reason
    assert step.metrics['replayed_windows'] > 0
    assert step.metrics['shown_frame'] < step.metrics['camera_frame']


def test_footage_replay_too_slow_misses_the_window(lab):
    world = build_world(lab, seed=3)
    world.run_until(seconds(5))
    report = footage_replay(world, capture_window=10, replay_delay_ms=3000, horizon_s=60)
    step = report.steps[0]
    assert step.outcome == Outcome.FAILED
    assert step.reason == "limited time frame"
    assert step.metrics['play_replies_seen'] >= 1
    # the NVR's media watchdog gave up before the first replayed packet arrived
    restarts = [world.trace[i] for i in step.evidence if world.trace[i].detail.get('event') == "restart"]
    assert restarts and restarts[0].detail['reason'] == "no media"
    assert step.metrics['window_closed_s'] < step.metrics['replay_started_s']


def test_footage_replay_inside_the_watchdog_window(lab):
    world = build_world(lab, seed=3)
    world.run_until(seconds(5))
    report = footage_replay(world, capture_window=10, replay_delay_ms=1500, horizon_s=60)
    step = report.steps[0]
    assert step.outcome == Outcome.ACHIEVED, step.reason
    assert 'window_closed_s' not in step.metrics


def test_footage_replay_with_empty_capture(lab):
    world = build_world(lab, seed=3)
    world.run_until(seconds(5))
    report = footage_replay(world, capture_window=0, horizon_s=10)
    assert report.steps[0].outcome == Outcome.FAILED
    assert report.steps[0].reason == "empty capture"


def test_hue_attack_chain(run_bundled):
    world, trace, report = run_bundled("hue-attacks")
    outcomes = {s.kind: s for s in report.steps}
    for kind in (StepKind.HUE_SNIFF_TOKEN, StepKind.HUE_LIGHT_OFF_LOOP, StepKind.HUE_ALERT_BLINK,
                 StepKind.HUE_VIRTUAL_LINKBUTTON_REGISTER, StepKind.HUE_RECONFIG):
        assert outcomes[kind].outcome == Outcome.ACHIEVED, (kind, outcomes[kind].reason)
    assert outcomes[StepKind.HUE_SNIFF_TOKEN].metrics['tokens'] == ["9MlfXk2rT7pQzL4vWn8sYc3bHd6gJa0e"]
    assert outcomes[StepKind.HUE_LIGHT_OFF_LOOP].metrics['samples_lit'] == 0
    assert world.actors["hue-bridge"].bridge.netconfig.dhcp is False
    issued = trace.notes("token_issued", "hue-bridge")
    assert [e.detail['requester'] for e in issued] == ["attacker"]


def test_registration_refused_without_link_button():
    """A POST without pressing the button first is answered with the bridge error"""
    scenario = Scenario(name="register-only", duration_s=5, seed=1,
                        vantage={'reach': ["hue-bridge"]},
                        steps=[AttackStep(kind=StepKind.HUE_VIRTUAL_LINKBUTTON_REGISTER, t_start=1)])
    world, _, report = run_scenario(scenario)
    step = report.steps[0]
    assert step.outcome == Outcome.FAILED
    assert step.reason == "link button not pressed"
    assert [r.status for r in world.actors["attacker"].http_log] == [400]


def test_step_without_vantage_fails_with_reason():
    scenario = Scenario(name="no-tap", duration_s=5,
                        steps=[AttackStep(kind=StepKind.RTP_DROP, t_start=1)])
    _, _, report = run_scenario(scenario)
    assert report.steps[0].outcome == Outcome.FAILED
    assert report.steps[0].reason == "no tap on link cam-nvr"


def test_missing_attacker_device(lab):
    scenario = Scenario(name="x", attacker="mallory", steps=[AttackStep(kind=StepKind.RTP_DROP)])
    with pytest.raises(ConfigurationError, match="mallory"):
        AttackEngine(build_world(lab), scenario)


def test_mqtt_wildcard_recon(run_bundled):
    world, _, report = run_bundled("mqtt-recon")
    step = report.steps[0]
    assert step.outcome == Outcome.ACHIEVED, step.reason
    assert {"/gfloor/livingroom/temp", "/gfloor/kitchen/temp", "/1floor/kitchen/temp"} <= set(step.metrics['topics'])
    published = {r.topic for r in world.actors["iot-gateway"].broker.published}
    assert set(step.metrics['topics']) <= published


def test_mqtt_connect_flood_refuses_legitimate_client(run_bundled):
    _, trace, report = run_bundled("mqtt-flood")
    step = report.steps[0]
    assert step.outcome == Outcome.ACHIEVED, step.reason
    assert step.metrics['first_refusal_after_s'] <= 5
    refused = [e for e in trace.notes("connack", "thermostat")
               if e.detail['code'] == ConnackCode.SERVER_UNAVAILABLE]
    assert refused


def test_mqtt_payload_flood(run_bundled):
    _, _, report = run_bundled("mqtt-payload-flood")
    step = report.steps[0]
    assert step.outcome == Outcome.ACHIEVED, step.reason
    assert step.metrics['published'] > 0


def test_delayed_keepalive_lets_the_camera_session_expire(lab):
    """Keepalives held back longer than the server timeout end the session"""
    world = build_world(lab, seed=1, settings=Settings().merged({'rtsp': {'timeout_s': 4}}))
    world.install_interposer(InterposerRule(link="cam-nvr", matcher=Matcher(pattern=rb"^GET_PARAMETER"),
                                            action=Action.DELAY, delay_us=seconds(5)))
    world.run_until(seconds(10))
    assert world.trace.notes("session_timeout", "camera")
    ends = [e for e in world.trace.states("camera", "rtsp-server") if e.detail['to'] == "TERMINATED"]
    assert ends and ends[0].detail['reason'] == "timeout"
