#!/usr/bin/env python3
"""
Tests for the event engine: ordering, interposers, taps and determinism
"""

import base64
import json

import pytest

from .errors import ConfigurationError
from .simnet import (Action, Actor, InterposerRule, Matcher, Verdict, World, deliver, install_interposer,
                     millis, run_until, seconds)
from .topology import parse_topology


def two_hosts(loss=0.0):
    return parse_topology({
        'name': "pair",
        'devices': [
            {'id': "a", 'class': "WORKSTATION", 'level': "MANAGEMENT"},
            {'id': "b", 'class': "IOT_DEVICE", 'level': "AUTOMATION"},
        ],
        'links': [{'id': "ab", 'a': "a", 'b': "b", 'latency_ms': 2,
                   'mode': "lossy" if loss else "reliable", 'loss': loss}],
    })


class Recorder(Actor):
    def __init__(self, device_id):
        super().__init__(device_id)
        self.frames = []

    def on_frame(self, world, frame):
        self.frames.append((world.now, frame.payload))


class Pinger(Actor):
    """Sends `count` frames to b, one per 10 ms"""

    def __init__(self, device_id, count=5):
        super().__init__(device_id)
        self.count = count

    def start(self, world):
        for i in range(self.count):
            world.schedule(millis(10 * i), lambda w, i=i: w.send("a", "b", f"ping {i}".encode(), "test"))


def test_delivery_respects_link_latency():
    """A frame sent at t arrives at t + latency and is logged sent then delivered"""
    world = World(two_hosts())
    sink = world.attach(Recorder("b"))
    world.attach(Pinger("a", count=1))
    trace = world.run_until(seconds(1))
    assert sink.frames == [(millis(2), b"ping 0")]
    kinds = [e.kind for e in trace if e.kind.startswith("frame")]
    assert kinds == ["frame_sent", "frame_delivered"]


def test_trace_is_totally_ordered():
    world = World(two_hosts())
    world.attach(Recorder("b"))
    world.attach(Pinger("a", count=20))
    trace = world.run_until(seconds(1))
    times = [e.t_us for e in trace]
    assert times == sorted(times)
    assert [e.id for e in trace] == list(range(len(trace)))


def test_same_time_events_run_in_insertion_order():
    world = World(two_hosts())
    seen = []
    for i in range(5):
        world.schedule(100, lambda w, i=i: seen.append(i))
    world.run_until(200)
    assert seen == [0, 1, 2, 3, 4]


def test_schedule_in_the_past_is_rejected():
    world = World(two_hosts())
    world.run_until(1000)
    with pytest.raises(ValueError):
        world.schedule(10, lambda w: None)


def test_drop_rule_records_drop_and_blocks_delivery():
    world = World(two_hosts())
    sink = world.attach(Recorder("b"))
    world.attach(Pinger("a", count=3))
    install_interposer(world, InterposerRule(link="ab", matcher=Matcher(pattern=rb"^ping 1"), action=Action.DROP))
    trace = run_until(world, seconds(1))
    assert [p for _, p in sink.frames] == [b"ping 0", b"ping 2"]
    dropped = trace.of_kind("frame_dropped")
    assert len(dropped) == 1 and dropped[0].detail['reason'] == "rule"


def test_tamper_rule_rewrites_payload_and_keeps_original():
    world = World(two_hosts())
    sink = world.attach(Recorder("b"))
    world.attach(Pinger("a", count=1))
    world.install_interposer(InterposerRule(link="ab", matcher=Matcher(src="a"), action=Action.TAMPER,
                                            substitutions=[(rb"ping", b"pong")]))
    trace = world.run_until(seconds(1))
    assert sink.frames[0][1] == b"pong 0"
    tampered = trace.of_kind("frame_tampered")[0]
    assert base64.b64decode(tampered.detail['original_b64']) == b"ping 0"
    assert trace.delivered()[0].verdict == Verdict.TAMPERED.value


def test_rules_apply_in_installation_order():
    """A drop installed after a tamper sees the tampered payload"""
    world = World(two_hosts())
    sink = world.attach(Recorder("b"))
    world.attach(Pinger("a", count=2))
    world.install_interposer(InterposerRule(link="ab", matcher=Matcher(pattern=rb"ping 0"), action=Action.TAMPER,
                                            substitutions=[(rb"ping 0", b"drop me")]))
    world.install_interposer(InterposerRule(link="ab", matcher=Matcher(pattern=rb"^drop"), action=Action.DROP))
    world.run_until(seconds(1))
    assert [p for _, p in sink.frames] == [b"ping 1"]


def test_delay_and_inject_rules():
    world = World(two_hosts())
    sink = world.attach(Recorder("b"))
    world.attach(Pinger("a", count=1))
    world.install_interposer(InterposerRule(link="ab", action=Action.DELAY, delay_us=millis(50)))
    world.install_interposer(InterposerRule(link="ab", action=Action.INJECT, inject_payload=b"extra",
                                            inject_count=2, inject_spacing_us=millis(1)))
    trace = world.run_until(seconds(1))
    assert sink.frames[0] == (millis(52), b"ping 0")
    assert [p for _, p in sink.frames[1:]] == [b"extra", b"extra"]
    injected = [e for e in trace.sent() if e.detail.get('injected')]
    assert len(injected) == 2


def test_inject_now_returns_frame_and_later_returns_none():
    world = World(two_hosts())
    sink = world.attach(Recorder("b"))
    frame = world.inject("ab", "a", "b", b"now", "test")
    assert frame is not None and frame.payload == b"now"
    assert world.inject("ab", "a", "b", b"later", "test", at=millis(20)) is None
    trace = world.run_until(seconds(1))
    assert sink.frames == [(millis(2), b"now"), (millis(22), b"later")]
    assert [e.t_us for e in trace.sent() if e.detail.get('injected')] == [0, millis(20)]


def test_removed_rule_no_longer_applies():
    world = World(two_hosts())
    sink = world.attach(Recorder("b"))
    world.attach(Pinger("a", count=4))
    rule_id = world.install_interposer(InterposerRule(link="ab", action=Action.DROP))
    world.schedule(millis(15), lambda w: w.remove_interposer(rule_id))
    world.run_until(seconds(1))
    assert [p for _, p in sink.frames] == [b"ping 2", b"ping 3"]


def test_unknown_link_is_a_configuration_error():
    world = World(two_hosts())
    with pytest.raises(ConfigurationError):
        world.install_interposer(InterposerRule(link="nope", action=Action.DROP))
    with pytest.raises(ConfigurationError):
        world.add_tap("nope", lambda w, f: None)


def test_taps_observe_without_changing_delivery():
    world = World(two_hosts())
    sink = world.attach(Recorder("b"))
    world.attach(Pinger("a", count=3))
    seen = []
    world.add_tap("ab", lambda w, f: seen.append(f.payload))
    world.run_until(seconds(1))
    assert seen == [p for _, p in sink.frames]


def test_module_level_deliver_returns_outcome():
    world = World(two_hosts())
    world.attach(Recorder("b"))
    world.install_interposer(InterposerRule(link="ab", action=Action.DROP))
    frame = world._new_frame("a", "b", "ab", b"x", "test", None, None)
    outcome = deliver(world, frame)
    assert outcome.verdict == Verdict.DROPPED
    assert outcome.delivered_at is None


def test_probabilistic_drop_is_seeded():
    def dropped(seed):
        world = World(two_hosts(), seed=seed)
        world.attach(Recorder("b"))
        world.attach(Pinger("a", count=50))
        world.install_interposer(InterposerRule(link="ab", action=Action.DROP, probability=0.5))
        return [e.frame_id for e in world.run_until(seconds(1)).of_kind("frame_dropped")]
    assert dropped(4) == dropped(4)
    assert 0 < len(dropped(4)) < 50


def test_lossy_link_drops_with_reason_loss():
    world = World(two_hosts(loss=0.5), seed=9)
    world.attach(Recorder("b"))
    world.attach(Pinger("a", count=40))
    trace = world.run_until(seconds(1))
    losses = trace.of_kind("frame_dropped")
    assert losses and all(e.detail['reason'] == "loss" for e in losses)


def test_actor_fault_is_recorded_and_simulation_continues():
    class Faulty(Actor):
        def on_frame(self, world, frame):
            raise RuntimeError("boom")

    world = World(two_hosts())
    world.attach(Faulty("b"))
    world.attach(Pinger("a", count=2))
    trace = world.run_until(seconds(1))
    assert len(trace.of_kind("actor_fault")) == 2
    assert len(trace.delivered()) == 2


def test_transition_records_only_changes():
    world = World(two_hosts())
    assert world.transition("a", "m", "X", "X") is None
    event_id = world.transition("a", "m", "X", "Y", reason="test")
    event = world.trace[event_id]
    assert event.detail == {'machine': "m", 'from': "X", 'to': "Y", 'reason': "test"}


def test_jsonl_export_truncates_payloads():
    world = World(two_hosts())
    world.attach(Recorder("b"))
    world.schedule(0, lambda w: w.send("a", "b", b"x" * 100, "test"))
    trace = world.run_until(seconds(1))
    records = [json.loads(line) for line in trace.to_jsonl(payload_limit=10).splitlines()]
    sent = [r for r in records if r['kind'] == "frame_sent"][0]
    assert base64.b64decode(sent['payload_b64']) == b"x" * 10
    assert sent['detail']['payload_len'] == 100
    assert len(trace.sent()[0].payload) == 100


def test_same_seed_gives_identical_traces():
    def export(seed):
        world = World(two_hosts(loss=0.3), seed=seed)
        world.attach(Recorder("b"))
        world.attach(Pinger("a", count=30))
        world.install_interposer(InterposerRule(link="ab", action=Action.DROP, probability=0.2))
        return world.run_until(seconds(1)).to_jsonl()
    assert export(21) == export(21)
