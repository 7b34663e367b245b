#!/usr/bin/env python3
"""
Attack engine
Turns scenario steps into interposer rules, taps, injected traffic and API
calls from the attacker device, then judges every step against the trace.
"""

import json
import logging
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Deque, Dict, List, Literal, Optional, Set, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import hue, mqtt, rtp, rtsp
from .config import Settings, format_validation_error
from .detect import availability, detect
from .devices import build_world
from .errors import ConfigurationError, MqttProtocolError, TopicFilterError
from .scenario import (AttackReport, AttackStep, Outcome, Scenario, StepKind, StepReport, Vantage,
                       resolve_scenario)
from .simnet import (Action, Actor, Frame, InterposerRule, Matcher, Trace, TraceEvent, World,
                     millis, seconds)
from .topology import Role

logger = logging.getLogger(__name__)

EVIDENCE_LIMIT = 20
CSEQ = re.compile(rb"^CSeq:\s*(\d+)", re.MULTILINE | re.IGNORECASE)


# -- step parameters -----------------------------------------------------------------

class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class NoParams(_Params):
    pass


class RtspMethodParams(_Params):
    method: rtsp.Method = rtsp.Method.SETUP


class TamperStatusParams(_Params):
    method: rtsp.Method = rtsp.Method.DESCRIBE
    status: int = 401


class TamperPortParams(_Params):
    port: Optional[int] = None


class ReplaceKeepaliveParams(_Params):
    replacement: Literal["DESCRIBE", "TEARDOWN"] = Field("TEARDOWN", alias="with")


class RtpDropParams(_Params):
    fraction: float = Field(1.0, ge=0.0, le=1.0)


class RtpFloodParams(_Params):
    rate: Optional[int] = Field(None, gt=0)
    ssrc: Optional[int] = None
    port: Optional[int] = None


class ReplayParams(_Params):
    capture_window_s: float = Field(10.0, ge=0)
    replay_delay_ms: Optional[int] = Field(None, ge=0)


class SniffParams(_Params):
    verify: bool = True


class RegisterParams(_Params):
    token: Optional[str] = None
    devicetype: str = "attacker#rpi"


class LightOffParams(_Params):
    token: Optional[str] = None
    period_s: Optional[float] = Field(None, gt=0)
    light: int = 1


class AlertBlinkParams(_Params):
    token: Optional[str] = None
    light: int = 1
    mode: Literal["select", "lselect"] = "lselect"
    repeat_s: float = Field(15.0, gt=0)


class ReconfigParams(_Params):
    token: Optional[str] = None
    netconfig: Dict[str, Any] = {"ipaddress": "10.13.37.20", "dhcp": False,
                                 "netmask": "255.255.255.0", "gateway": "10.13.37.1"}


class ReconParams(_Params):
    topic_filter: str = Field("#", alias="filter")
    client_id: str = "recon"

    @field_validator("topic_filter")
    @classmethod
    def _valid_filter(cls, value: str) -> str:
        try:
            mqtt.validate_filter(value)
        except TopicFilterError as e:
            raise ValueError(str(e))
        return value


class ConnectFloodParams(_Params):
    rate: Optional[int] = Field(None, gt=0)


class PayloadFloodParams(_Params):
    size: Optional[int] = Field(None, ge=0)
    qos: int = Field(2, ge=0, le=2)
    rate: Optional[int] = Field(None, gt=0)
    connections: Optional[int] = Field(None, gt=0)


PARAMS = {
    StepKind.RTSP_DROP_REQUEST: RtspMethodParams,
    StepKind.RTSP_TAMPER_SETUP_PORT: TamperPortParams,
    StepKind.RTSP_DROP_RESPONSE: RtspMethodParams,
    StepKind.RTSP_TAMPER_STATUS: TamperStatusParams,
    StepKind.RTSP_DROP_KEEPALIVE: NoParams,
    StepKind.RTSP_REPLACE_KEEPALIVE: ReplaceKeepaliveParams,
    StepKind.RTP_DROP: RtpDropParams,
    StepKind.RTP_INJECT_FLOOD: RtpFloodParams,
    StepKind.FOOTAGE_REPLAY: ReplayParams,
    StepKind.HUE_SNIFF_TOKEN: SniffParams,
    StepKind.HUE_VIRTUAL_LINKBUTTON_REGISTER: RegisterParams,
    StepKind.HUE_LIGHT_OFF_LOOP: LightOffParams,
    StepKind.HUE_ALERT_BLINK: AlertBlinkParams,
    StepKind.HUE_RECONFIG: ReconfigParams,
    StepKind.MQTT_WILDCARD_RECON: ReconParams,
    StepKind.MQTT_CONNECT_FLOOD: ConnectFloodParams,
    StepKind.MQTT_PAYLOAD_FLOOD: PayloadFloodParams,
}

VIDEO_KINDS = {
    StepKind.RTSP_DROP_REQUEST, StepKind.RTSP_TAMPER_SETUP_PORT, StepKind.RTSP_DROP_RESPONSE,
    StepKind.RTSP_TAMPER_STATUS, StepKind.RTSP_DROP_KEEPALIVE, StepKind.RTSP_REPLACE_KEEPALIVE,
    StepKind.RTP_DROP, StepKind.RTP_INJECT_FLOOD, StepKind.FOOTAGE_REPLAY,
}
HUE_API_KINDS = {
    StepKind.HUE_VIRTUAL_LINKBUTTON_REGISTER, StepKind.HUE_LIGHT_OFF_LOOP,
    StepKind.HUE_ALERT_BLINK, StepKind.HUE_RECONFIG,
}
MQTT_KINDS = {StepKind.MQTT_WILDCARD_RECON, StepKind.MQTT_CONNECT_FLOOD, StepKind.MQTT_PAYLOAD_FLOOD}


def parse_step_params(step: AttackStep, index: int) -> BaseModel:
    try:
        return PARAMS[step.kind].model_validate(step.params)
    except ValidationError as e:
        raise ConfigurationError(format_validation_error(e, f"steps[{index}].params")) from e


# -- matchers --------------------------------------------------------------------------

def request_matcher(src: str, dst: str, method: str) -> Matcher:
    return Matcher(src=src, dst=dst, proto="rtsp", pattern=rf"^{method} ".encode('ascii'))


@dataclass
class ResponseMatcher(Matcher):
    """Matches responses whose CSeq belongs to an observed request of one method"""
    cseqs: Set[int] = field(default_factory=set)

    def matches(self, frame: Frame) -> bool:
        if not super().matches(frame):
            return False
        match = CSEQ.search(frame.payload)
        return match is not None and int(match.group(1)) in self.cseqs


def _cseq(payload: bytes) -> Optional[int]:
    match = CSEQ.search(payload)
    return int(match.group(1)) if match else None


# -- attacker device -------------------------------------------------------------------

@dataclass
class HttpResult:
    t_us: int
    method: str
    path: str
    status: int
    body: Any
    event_id: int


class AttackerActor(Actor):
    """The attacker's own machine: HTTP client, MQTT sessions, token notebook"""

    def __init__(self, device_id: str):
        super().__init__(device_id)
        self.known_tokens: List[str] = []
        self.http_log: List[HttpResult] = []
        self._http_pending: Deque[Tuple[str, str]] = deque()
        self.mqtt_clients: Dict[str, mqtt.ClientSession] = {}
        self.mqtt_connacks: Dict[str, int] = {}
        self.mqtt_received: List[Tuple[int, str, str]] = []
        self.http_listeners: List[Callable[[World, HttpResult], None]] = []

    def learn_token(self, token: str) -> None:
        if token not in self.known_tokens:
            self.known_tokens.append(token)

    def http(self, world: World, bridge: str, method: str, path: str, body: Any = None) -> None:
        text = json.dumps(body, sort_keys=True) if body is not None else ""
        self._http_pending.append((method, path))
        world.send(self.device_id, bridge, hue.encode_request(method, path, text), "http",
                   addr=world.address_of(bridge))

    def mqtt_send(self, world: World, broker: str, pkt: mqtt.MqttPacket) -> None:
        world.send(self.device_id, broker, mqtt.encode_packet(pkt), "mqtt")

    def mqtt_connect(self, world: World, broker: str, client_id: str) -> None:
        self.mqtt_clients[client_id] = mqtt.ClientSession(client_id)
        self.mqtt_send(world, broker, mqtt.MqttPacket(mqtt.PacketKind.CONNECT, client_id))

    def on_frame(self, world: World, frame: Frame) -> None:
        event_id = len(world.trace) - 1
        if frame.proto == "http":
            method, path = self._http_pending.popleft() if self._http_pending else ("", "")
            status, body = hue.parse_response(frame.payload)
            result = HttpResult(world.now, method, path, status, body, event_id)
            self.http_log.append(result)
            for m in hue.REGISTERED.findall(frame.payload):
                self.learn_token(m.decode('ascii'))
            for listener in list(self.http_listeners):
                listener(world, result)
        elif frame.proto == "mqtt":
            try:
                pkt = mqtt.decode_packet(frame.payload)
            except MqttProtocolError:
                return
            client = self.mqtt_clients.get(pkt.client_id)
            if client is None:
                return
            client, replies, delivered = mqtt.client_handle(client, pkt)
            for reply in replies:
                self.mqtt_send(world, frame.src, reply)
            if pkt.kind == mqtt.PacketKind.CONNACK:
                self.mqtt_connacks[pkt.client_id] = pkt.return_code
            for message in delivered:
                self.mqtt_received.append((world.now, pkt.client_id, message.topic))


# -- engine ----------------------------------------------------------------------------

@dataclass
class StepRun:
    index: int
    step: AttackStep
    params: BaseModel
    t0: int
    t1: int
    rules: List[int] = field(default_factory=list)
    taps: List[int] = field(default_factory=list)
    started: bool = False
    active: bool = False
    reason: Optional[str] = None
    evidence: List[int] = field(default_factory=list)
    data: Dict[str, Any] = field(default_factory=dict)


class AttackEngine:
    """Schedules scenario steps in a world and judges them afterwards"""

    def __init__(self, world: World, scenario: Scenario):
        self.world = world
        self.scenario = scenario
        self.settings: Settings = world.settings
        self.end_us = seconds(scenario.duration_s)
        topology = world.topology
        self.attacker_id = scenario.attacker
        self.camera = self._first(Role.CAMERA)
        self.nvr = self._first(Role.NVR)
        self.bridge = self._first(Role.HUE_BRIDGE)
        self.broker = self._first(Role.MQTT_BROKER)
        video = topology.link_between(self.camera, self.nvr) if self.camera and self.nvr else None
        self.video_link = video.id if video else None

        self.runs: List[StepRun] = []
        for i, step in enumerate(scenario.steps):
            params = parse_step_params(step, i)
            t1 = seconds(step.t_stop) if step.t_stop is not None else self.end_us
            self.runs.append(StepRun(i, step, params, seconds(step.t_start), min(t1, self.end_us)))

        self.attacker: Optional[AttackerActor] = None
        if self.runs:
            if not topology.has_device(self.attacker_id):
                raise ConfigurationError(f"attacker: unknown device id {self.attacker_id}")
            existing = world.actors.get(self.attacker_id)
            self.attacker = existing if isinstance(existing, AttackerActor) \
                else world.attach(AttackerActor(self.attacker_id))

        self._starters = {
            StepKind.RTSP_DROP_REQUEST: self._start_drop_request,
            StepKind.RTSP_TAMPER_SETUP_PORT: self._start_tamper_port,
            StepKind.RTSP_DROP_RESPONSE: self._start_drop_response,
            StepKind.RTSP_TAMPER_STATUS: self._start_tamper_status,
            StepKind.RTSP_DROP_KEEPALIVE: self._start_drop_keepalive,
            StepKind.RTSP_REPLACE_KEEPALIVE: self._start_replace_keepalive,
            StepKind.RTP_DROP: self._start_rtp_drop,
            StepKind.RTP_INJECT_FLOOD: self._start_rtp_flood,
            StepKind.FOOTAGE_REPLAY: self._start_replay,
            StepKind.HUE_SNIFF_TOKEN: self._start_sniff,
            StepKind.HUE_VIRTUAL_LINKBUTTON_REGISTER: self._start_register,
            StepKind.HUE_LIGHT_OFF_LOOP: self._start_light_off,
            StepKind.HUE_ALERT_BLINK: self._start_alert_blink,
            StepKind.HUE_RECONFIG: self._start_reconfig,
            StepKind.MQTT_WILDCARD_RECON: self._start_recon,
            StepKind.MQTT_CONNECT_FLOOD: self._start_connect_flood,
            StepKind.MQTT_PAYLOAD_FLOOD: self._start_payload_flood,
        }
        self._judges = {
            StepKind.RTSP_DROP_REQUEST: self._judge_setup_dos,
            StepKind.RTSP_TAMPER_SETUP_PORT: self._judge_setup_dos,
            StepKind.RTSP_DROP_RESPONSE: self._judge_setup_dos,
            StepKind.RTSP_TAMPER_STATUS: self._judge_setup_dos,
            StepKind.RTSP_DROP_KEEPALIVE: self._judge_drop_keepalive,
            StepKind.RTSP_REPLACE_KEEPALIVE: self._judge_replace_keepalive,
            StepKind.RTP_DROP: self._judge_rtp_drop,
            StepKind.RTP_INJECT_FLOOD: self._judge_rtp_flood,
            StepKind.FOOTAGE_REPLAY: self._judge_replay,
            StepKind.HUE_SNIFF_TOKEN: self._judge_sniff,
            StepKind.HUE_VIRTUAL_LINKBUTTON_REGISTER: self._judge_register,
            StepKind.HUE_LIGHT_OFF_LOOP: self._judge_light_off,
            StepKind.HUE_ALERT_BLINK: self._judge_alert_blink,
            StepKind.HUE_RECONFIG: self._judge_reconfig,
            StepKind.MQTT_WILDCARD_RECON: self._judge_recon,
            StepKind.MQTT_CONNECT_FLOOD: self._judge_connect_flood,
            StepKind.MQTT_PAYLOAD_FLOOD: self._judge_payload_flood,
        }

    def _first(self, role: Role) -> Optional[str]:
        devices = self.world.topology.by_role(role)
        return devices[0].id if devices else None

    # -- scheduling ------------------------------------------------------------------

    def install(self) -> None:
        for run in self.runs:
            kind = run.step.kind.value
            self.world.schedule(run.t0, lambda w, r=run: self._begin(r),
                                label=f"attack-start:{kind}", owner=self.attacker_id)
            if run.step.t_stop is not None and run.t1 < self.end_us:
                self.world.schedule(run.t1, lambda w, r=run: self._end(r),
                                    label=f"attack-stop:{kind}", owner=self.attacker_id)

    def _vantage_problem(self, kind: StepKind) -> Optional[str]:
        vantage = self.scenario.vantage
        topology = self.world.topology
        if kind in VIDEO_KINDS:
            if self.video_link is None:
                return "no camera-NVR link in topology"
            if self.video_link not in vantage.taps:
                return f"no tap on link {self.video_link}"
        elif kind == StepKind.HUE_SNIFF_TOKEN:
            if self.bridge is None:
                return "no Hue bridge in topology"
            bridge_links = {l.id for l in topology.links if self.bridge in (l.a, l.b)}
            if not bridge_links & set(vantage.taps):
                return f"no tap on a link of {self.bridge}"
        elif kind in HUE_API_KINDS:
            return self._reach_problem(self.bridge, "Hue bridge")
        elif kind in MQTT_KINDS:
            return self._reach_problem(self.broker, "MQTT broker")
        return None

    def _reach_problem(self, device: Optional[str], what: str) -> Optional[str]:
        if device is None:
            return f"no {what} in topology"
        if device not in self.scenario.vantage.reach:
            return f"no reach to {device}"
        if self.world.topology.link_between(self.attacker_id, device) is None:
            return f"no link from {self.attacker_id} to {device}"
        return None

    def _begin(self, run: StepRun) -> None:
        run.started = True
        problem = self._vantage_problem(run.step.kind)
        if problem:
            run.reason = problem
            logger.warning(f"Step {run.index} {run.step.kind.value} cannot run: {problem}")
            return
        run.active = True
        logger.info(f"Step {run.index} {run.step.kind.value} started at {self.world.now}us")
        self._starters[run.step.kind](run)

    def _end(self, run: StepRun) -> None:
        run.active = False
        for rule_id in run.rules:
            self.world.remove_interposer(rule_id)
        for tap_id in run.taps:
            self.world.remove_tap(tap_id)
        logger.info(f"Step {run.index} {run.step.kind.value} stopped at {self.world.now}us")

    def _rule(self, run: StepRun, matcher: Matcher, action: Action, **kwargs: Any) -> InterposerRule:
        rule = InterposerRule(link=self.video_link, matcher=matcher, action=action, **kwargs)
        run.rules.append(self.world.install_interposer(rule))
        return rule

    def _every(self, run: StepRun, interval_us: int, action: Callable[[World], None]) -> None:
        """Repeat action while the step is active"""
        def fire(world: World) -> None:
            if not run.active or world.now > run.t1:
                return
            action(world)
            world.call_later(interval_us, fire)
        fire(self.world)

    # -- RTSP session attacks ----------------------------------------------------------

    def _start_drop_request(self, run: StepRun) -> None:
        self._rule(run, request_matcher(self.nvr, self.camera, run.params.method.value), Action.DROP)

    def _watch_requests(self, run: StepRun, method: str, matcher: ResponseMatcher) -> None:
        def tap(world: World, frame: Frame) -> None:
            if frame.src == self.nvr and frame.proto == "rtsp" and frame.payload.startswith(f"{method} ".encode()):
                cseq = _cseq(frame.payload)
                if cseq is not None:
                    matcher.cseqs.add(cseq)
        run.taps.append(self.world.add_tap(self.video_link, tap))

    def _start_drop_response(self, run: StepRun) -> None:
        matcher = ResponseMatcher(src=self.camera, dst=self.nvr, proto="rtsp")
        self._watch_requests(run, run.params.method.value, matcher)
        self._rule(run, matcher, Action.DROP)

    def _start_tamper_status(self, run: StepRun) -> None:
        matcher = ResponseMatcher(src=self.camera, dst=self.nvr, proto="rtsp", pattern=rb"^RTSP/1\.0 200 ")
        self._watch_requests(run, run.params.method.value, matcher)
        status = run.params.status
        reason = rtsp.REASONS.get(status, "Error")
        self._rule(run, matcher, Action.TAMPER,
                   substitutions=[(rb"^RTSP/1\.0 200 OK", f"RTSP/1.0 {status} {reason}".encode())])

    def _start_tamper_port(self, run: StepRun) -> None:
        port = run.params.port or self.settings.attacks.tamper_port
        run.data['port'] = port
        self._rule(run, request_matcher(self.nvr, self.camera, "SETUP"), Action.TAMPER,
                   substitutions=[(rb"client_port=\d+-\d+", f"client_port={port}-{port + 1}".encode())])

    def _start_drop_keepalive(self, run: StepRun) -> None:
        self._rule(run, request_matcher(self.nvr, self.camera, "GET_PARAMETER"), Action.DROP)

    def _start_replace_keepalive(self, run: StepRun) -> None:
        replacement = run.params.replacement
        self._rule(run, request_matcher(self.nvr, self.camera, "GET_PARAMETER"), Action.TAMPER,
                   substitutions=[(rb"^GET_PARAMETER ", f"{replacement} ".encode())])

    # -- RTP attacks --------------------------------------------------------------------

    def _start_rtp_drop(self, run: StepRun) -> None:
        self._rule(run, Matcher(src=self.camera, dst=self.nvr, proto="rtp"), Action.DROP,
                   probability=run.params.fraction)

    def _nvr_port(self) -> int:
        actor = self.world.actors.get(self.nvr)
        session = getattr(actor, "session", None)
        return session.client_port if session is not None else self.settings.rtsp.client_port

    def _start_rtp_flood(self, run: StepRun) -> None:
        rate = run.params.rate or self.settings.attacks.rtp_flood_rate
        ssrc = run.params.ssrc if run.params.ssrc is not None else self.world.rng.getrandbits(32)
        port = run.params.port or self._nvr_port()
        source = rtp.RtpSource(ssrc=ssrc, label=rtp.LABEL_ATTACKER,
                               packets_per_frame=self.settings.rtp.packets_per_frame, playing=True)
        interval = max(1, seconds(source.packets_per_frame / rate))
        run.data.update({'ssrc': ssrc, 'injected': 0})

        def burst(world: World) -> None:
            for pkt in rtp.emit_frame_packets(source, world.now):
                world.inject(self.video_link, self.attacker_id, self.nvr, rtp.encode_packet(pkt), "rtp", dport=port)
                run.data['injected'] += 1
        self._every(run, interval, burst)

    # -- footage replay ---------------------------------------------------------------

    def _start_replay(self, run: StepRun) -> None:
        params: ReplayParams = run.params
        capture_us = seconds(params.capture_window_s)
        delay_us = millis(params.replay_delay_ms if params.replay_delay_ms is not None
                          else self.settings.attacks.replay_delay_ms)
        run.data.update({'captured': [], 'replay_started': None, 'play_ok': [], 'stage': "capture"})
        if capture_us == 0:
            run.reason = "empty capture"
            return
        captured: List[Tuple[int, bytes, Optional[int]]] = run.data['captured']

        def capture(world: World, frame: Frame) -> None:
            if frame.src == self.camera and frame.proto == "rtp":
                captured.append((world.now, frame.payload, frame.dport))
        capture_tap = self.world.add_tap(self.video_link, capture)
        run.taps.append(capture_tap)
        self.world.call_later(capture_us, lambda w: self._replay_stage_three(run, capture_tap, delay_us),
                              label="replay-stage", owner=self.attacker_id)

    def _replay_stage_three(self, run: StepRun, capture_tap: int, delay_us: int) -> None:
        if not run.active:
            return
        self.world.remove_tap(capture_tap)
        run.taps.remove(capture_tap)
        if not [c for c in run.data['captured'] if not rtp.decode_packet(c[1]).rtcp]:
            run.reason = "empty capture"
            return
        run.data['stage'] = "force-teardown"
        # keepalives become TEARDOWN so the camera ends the session
        self._rule(run, request_matcher(self.nvr, self.camera, "GET_PARAMETER"), Action.TAMPER,
                   substitutions=[(rb"^GET_PARAMETER ", b"TEARDOWN ")])
        port = self.settings.attacks.tamper_port
        self._rule(run, request_matcher(self.nvr, self.camera, "SETUP"), Action.TAMPER,
                   substitutions=[(rb"client_port=\d+-\d+", f"client_port={port}-{port + 1}".encode())])
        play_cseqs: Set[int] = set()

        def watch(world: World, frame: Frame) -> None:
            if frame.proto != "rtsp":
                return
            if frame.src == self.nvr and frame.payload.startswith(b"PLAY "):
                cseq = _cseq(frame.payload)
                if cseq is not None:
                    play_cseqs.add(cseq)
            elif frame.src == self.camera and frame.payload.startswith(b"RTSP/1.0 200 ") \
                    and _cseq(frame.payload) in play_cseqs:
                run.data['play_ok'].append(world.now)
                if run.data['replay_started'] is not None:
                    return
                run.data['stage'] = "replay"
                world.call_later(delay_us, lambda w: self._replay_loop(run, w.now),
                                 label="replay-start", owner=self.attacker_id)
                run.data['replay_started'] = world.now + delay_us
        run.taps.append(self.world.add_tap(self.video_link, watch))

    def _replay_loop(self, run: StepRun, start: int) -> None:
        captured = [c for c in run.data['captured'] if not rtp.decode_packet(c[1]).rtcp]
        first = captured[0][0]
        period = captured[-1][0] - first + millis(self.settings.rtp.frame_interval_ms)
        if not run.active or start >= self.end_us:
            return
        for t, payload, dport in captured:
            at = start + (t - first)
            if at > self.end_us:
                break
            self.world.inject(self.video_link, self.attacker_id, self.nvr, payload, "rtp", dport=dport,
                              at=at)
        self.world.schedule(start + period, lambda w: self._replay_loop(run, start + period))

    # -- Hue attacks --------------------------------------------------------------------

    def _start_sniff(self, run: StepRun) -> None:
        links = [l.id for l in self.world.topology.links
                 if self.bridge in (l.a, l.b) and l.id in self.scenario.vantage.taps]
        run.data.update({'links': links, 'verified': [], 'first_seen': {}})
        can_verify = run.params.verify and self._reach_problem(self.bridge, "Hue bridge") is None

        def tap(world: World, frame: Frame) -> None:
            if frame.proto != "http":
                return
            path = hue.API_PATH.match(frame.payload)
            found = [path.group(1).decode('ascii')] if path else []
            found += [m.decode('ascii') for m in hue.REGISTERED.findall(frame.payload)]
            for token in found:
                if token in run.data['first_seen']:
                    continue
                run.data['first_seen'][token] = world.now
                self.attacker.learn_token(token)
                if can_verify:
                    self.attacker.http(world, self.bridge, "GET", f"/api/{token}/config")
        for link in links:
            run.taps.append(self.world.add_tap(link, tap))

    def _token_for(self, run: StepRun) -> Optional[str]:
        token = getattr(run.params, 'token', None)
        if token:
            return token
        return self.attacker.known_tokens[0] if self.attacker.known_tokens else None

    def _start_register(self, run: StepRun) -> None:
        token = self._token_for(run)
        run.data['token'] = token
        if token is None:
            run.reason = "no API token known"
        else:
            self.attacker.http(self.world, self.bridge, "PUT", f"/api/{token}/config", {"linkbutton": True})
        devicetype = run.params.devicetype
        self.world.call_later(millis(100), lambda w: self.attacker.http(
            w, self.bridge, "POST", "/api", {"devicetype": devicetype}))

    def _start_light_off(self, run: StepRun) -> None:
        token = self._token_for(run)
        if token is None:
            run.reason = "no API token known"
            return
        period = run.params.period_s or self.settings.attacks.light_off_period_s
        run.data.update({'token': token, 'period_s': period})
        path = f"/api/{token}/lights/{run.params.light}/state"
        self._every(run, seconds(period), lambda w: self.attacker.http(w, self.bridge, "PUT", path, {"on": False}))

    def _start_alert_blink(self, run: StepRun) -> None:
        token = self._token_for(run)
        if token is None:
            run.reason = "no API token known"
            return
        path = f"/api/{token}/lights/{run.params.light}/state"
        mode = run.params.mode
        self._every(run, seconds(run.params.repeat_s),
                    lambda w: self.attacker.http(w, self.bridge, "PUT", path, {"alert": mode}))

    def _start_reconfig(self, run: StepRun) -> None:
        token = self._token_for(run)
        if token is None:
            run.reason = "no API token known"
            return
        self.attacker.http(self.world, self.bridge, "PUT", f"/api/{token}/config", run.params.netconfig)

    # -- MQTT attacks --------------------------------------------------------------------

    def _start_recon(self, run: StepRun) -> None:
        client_id = run.params.client_id
        run.data['client_id'] = client_id
        self.attacker.mqtt_connect(self.world, self.broker, client_id)

        def subscribe(world: World) -> None:
            if self.attacker.mqtt_connacks.get(client_id) != mqtt.ConnackCode.ACCEPTED:
                return
            self.attacker.mqtt_send(world, self.broker, mqtt.MqttPacket(
                mqtt.PacketKind.SUBSCRIBE, client_id, run.params.topic_filter, packet_id=1))
        self.world.call_later(millis(50), subscribe)

    def _start_connect_flood(self, run: StepRun) -> None:
        rate = run.params.rate or self.settings.attacks.connect_flood_rate
        interval = max(1, seconds(1.0 / rate))
        run.data['sent'] = 0

        def connect(world: World) -> None:
            run.data['sent'] += 1
            client_id = f"flood-{run.index}-{run.data['sent']}"
            self.attacker.mqtt_send(world, self.broker, mqtt.MqttPacket(mqtt.PacketKind.CONNECT, client_id))
        self._every(run, interval, connect)

    def _start_payload_flood(self, run: StepRun) -> None:
        cfg = self.settings.attacks
        size = run.params.size if run.params.size is not None else cfg.payload_flood_size
        rate = run.params.rate or cfg.payload_flood_rate
        connections = run.params.connections or cfg.payload_flood_connections
        client_ids = [f"pf-{run.index}-{i}" for i in range(connections)]
        for client_id in client_ids:
            self.attacker.mqtt_connect(self.world, self.broker, client_id)
        run.data.update({'published': 0, 'client_ids': client_ids})
        payload = bytes(size)
        qos = run.params.qos

        def publish(world: World) -> None:
            live = [c for c in client_ids if self.attacker.mqtt_connacks.get(c) == mqtt.ConnackCode.ACCEPTED]
            if not live:
                return
            client = self.attacker.mqtt_clients[live[run.data['published'] % len(live)]]
            pkt = mqtt.publish_packet(client, f"/flood/{run.data['published'] % 16}", payload, qos)
            self.attacker.mqtt_send(world, self.broker, pkt)
            run.data['published'] += 1
        self.world.call_later(millis(50), lambda w: self._every(run, max(1, seconds(1.0 / rate)), publish))

    # -- judging ----------------------------------------------------------------------------

    def evaluate(self) -> List[StepReport]:
        reports = []
        for run in self.runs:
            if not run.started:
                outcome, reason, metrics = Outcome.FAILED, "step never started", {}
            elif run.reason and not run.active and not run.rules and not run.taps:
                outcome, reason, metrics = Outcome.FAILED, run.reason, {}
            else:
                outcome, reason, metrics = self._judges[run.step.kind](run)
            reports.append(StepReport(
                index=run.index, kind=run.step.kind, t_start=run.step.t_start, t_stop=run.step.t_stop,
                outcome=outcome, reason=reason, evidence=sorted(set(run.evidence))[:EVIDENCE_LIMIT],
                metrics=metrics,
            ))
        return reports

    def _trace(self) -> Trace:
        return self.world.trace

    def _in(self, event: TraceEvent, run: StepRun, grace_us: int = 0) -> bool:
        return run.t0 <= event.t_us <= run.t1 + grace_us

    def _rule_events(self, run: StepRun) -> List[TraceEvent]:
        rules = set(run.rules)
        return [e for e in self._trace().of_kind("frame_dropped", "frame_tampered")
                if e.detail.get('rule') in rules]

    def _renders(self, run: StepRun) -> List[TraceEvent]:
        return [e for e in self._trace().notes("render", self.nvr) if self._in(e, run)]

    def _status_counts(self, events: List[TraceEvent]) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for e in events:
            counts[e.detail['status']] = counts.get(e.detail['status'], 0) + 1
        return dict(sorted(counts.items()))

    def _recovery(self, run: StepRun) -> Optional[float]:
        if run.step.t_stop is None:
            return None
        ups = [e.t_us for e in self._trace().notes("stream_up", self.nvr) if e.t_us >= run.t1]
        return round((ups[0] - run.t1) / 1e6, 6) if ups else None

    def _judge_setup_dos(self, run: StepRun):
        hits = self._rule_events(run)
        run.evidence += [e.id for e in hits]
        ups = [e for e in self._trace().notes("stream_up", self.nvr) if self._in(e, run)]
        renders = self._renders(run)
        metrics = {
            'frames_hit': len(hits),
            'windows': self._status_counts(renders),
            'stream_established': bool(ups),
            'recovered_after_s': self._recovery(run),
        }
        if not hits:
            return Outcome.FAILED, "interposer never matched", metrics
        if ups:
            run.evidence += [e.id for e in ups]
            return Outcome.PARTIAL, "stream established despite interposer", metrics
        return Outcome.ACHIEVED, None, metrics

    def _judge_drop_keepalive(self, run: StepRun):
        hits = self._rule_events(run)
        timeouts = [e for e in self._trace().notes("session_timeout", self.camera) if self._in(e, run)]
        restarts = [e for e in self._trace().notes("restart", self.nvr)
                    if timeouts and e.t_us > timeouts[0].t_us and self._in(e, run)]
        run.evidence += [e.id for e in hits[:5] + timeouts + restarts[:5]]
        metrics = {
            'frames_hit': len(hits),
            'sessions_terminated': len(timeouts),
            'resetups': len(restarts),
            'termination_after_first_drop_s': round((timeouts[0].t_us - hits[0].t_us) / 1e6, 6)
            if hits and timeouts else None,
        }
        if timeouts and restarts:
            return Outcome.ACHIEVED, None, metrics
        if hits:
            return Outcome.PARTIAL, "keepalives dropped but session not terminated", metrics
        return Outcome.FAILED, "interposer never matched", metrics

    def _judge_replace_keepalive(self, run: StepRun):
        hits = self._rule_events(run)
        run.evidence += [e.id for e in hits[:5]]
        metrics: Dict[str, Any] = {'frames_hit': len(hits)}
        if not hits:
            return Outcome.FAILED, "interposer never matched", metrics
        if run.params.replacement == "DESCRIBE":
            rejected = [e for e in self._trace().delivered("rtsp")
                        if e.dst == self.nvr and self._in(e, run) and e.payload.startswith(b"RTSP/1.0 455 ")]
            teardowns = [e for e in self._trace().sent("rtsp")
                         if e.src == self.nvr and rejected and e.t_us >= rejected[0].t_us
                         and e.payload.startswith(b"TEARDOWN ")]
            metrics.update({'status_455': len(rejected), 'client_teardowns': len(teardowns)})
            run.evidence += [e.id for e in rejected[:5] + teardowns[:5]]
            if rejected and teardowns:
                return Outcome.ACHIEVED, None, metrics
            return Outcome.PARTIAL, "no 455 followed by TEARDOWN", metrics
        ends = [e for e in self._trace().states(self.camera, "rtsp-server")
                if e.detail.get('to') == "TERMINATED" and e.detail.get('reason') == "TEARDOWN" and self._in(e, run)]
        first_hit = hits[0].t_us
        immediate = [e for e in ends if e.t_us - first_hit <= seconds(1)]
        restarts = [e for e in self._trace().notes("restart", self.nvr) if ends and e.t_us > ends[0].t_us]
        metrics.update({'sessions_terminated': len(ends), 'resetups': len(restarts),
                        'termination_delay_s': round((ends[0].t_us - first_hit) / 1e6, 6) if ends else None})
        run.evidence += [e.id for e in ends[:5] + restarts[:5]]
        if immediate and restarts:
            return Outcome.ACHIEVED, None, metrics
        if ends:
            return Outcome.PARTIAL, "session terminated without re-setup", metrics
        return Outcome.FAILED, "camera never terminated the session", metrics

    def _judge_rtp_drop(self, run: StepRun):
        hits = self._rule_events(run)
        renders = self._renders(run)
        frozen = [e for e in renders if e.detail['status'] == rtp.RenderStatus.FROZEN.value]
        restarts = [e for e in self._trace().notes("restart", self.nvr) if self._in(e, run)]
        run.evidence += [e.id for e in frozen[:10] + restarts[:5]]
        metrics = {'packets_dropped': len(hits), 'windows': self._status_counts(renders),
                   'nvr_restarts': len(restarts)}
        if frozen or restarts:
            return Outcome.ACHIEVED, None, metrics
        if hits:
            return Outcome.PARTIAL, "packets dropped without visible effect", metrics
        return Outcome.FAILED, "no RTP packets matched", metrics

    def _judge_rtp_flood(self, run: StepRun):
        renders = self._renders(run)
        mixed = [e for e in renders if e.detail['status'] in (rtp.RenderStatus.FOREIGN.value,
                                                               rtp.RenderStatus.CORRUPTED.value)]
        run.evidence += [e.id for e in mixed[:10]]
        metrics = {'injected': run.data.get('injected', 0), 'ssrc': f"{run.data.get('ssrc', 0):08X}",
                   'windows': self._status_counts(renders)}
        if mixed:
            return Outcome.ACHIEVED, None, metrics
        if run.data.get('injected'):
            return Outcome.PARTIAL, "flood did not change what the NVR shows", metrics
        return Outcome.FAILED, "nothing injected", metrics

    def _camera_frames_sent(self) -> List[Tuple[int, int]]:
        out = []
        for e in self._trace().sent("rtp"):
            if e.src != self.camera:
                continue
            pkt = rtp.decode_packet(e.payload)
            if not pkt.rtcp:
                out.append((e.t_us, pkt.frame))
        return out

    def _judge_replay(self, run: StepRun):
        data = run.data
        captured = [c for c in data.get('captured', []) if not rtp.decode_packet(c[1]).rtcp]
        metrics: Dict[str, Any] = {
            'captured_packets': len(captured),
            'stage': data.get('stage'),
            'replay_started_s': round(data['replay_started'] / 1e6, 6) if data.get('replay_started') else None,
            'play_replies_seen': len(data.get('play_ok', [])),
        }
        if run.reason == "empty capture" or (data and not captured):
            return Outcome.FAILED, "empty capture", metrics
        if not data.get('replay_started'):
            return Outcome.FAILED, "NVR never re-established a session", metrics
        missed = self._replay_window_closed(data['play_ok'][0], data['replay_started'])
        if missed:
            run.evidence += [e.id for e in missed[:5]]
            metrics['window_closed_s'] = round(missed[0].t_us / 1e6, 6)
            return Outcome.FAILED, "limited time frame", metrics
        camera_frames = self._camera_frames_sent()
        stale = []
        for e in self._renders(run):
            if e.t_us < data['replay_started'] or e.detail['status'] != rtp.RenderStatus.FOREIGN.value:
                continue
            shown = e.detail.get('frame')
            live = max((f for t, f in camera_frames if t <= e.t_us), default=None)
            if shown and live is not None and shown[1] < live:
                stale.append(e)
        metrics['replayed_windows'] = len(stale)
        if stale:
            metrics['shown_frame'] = stale[-1].detail['frame'][1]
            metrics['camera_frame'] = max(f for t, f in camera_frames if t <= stale[-1].t_us)
        run.evidence += [e.id for e in stale[:10]]
        if stale:
            return Outcome.ACHIEVED, None, metrics
        return Outcome.PARTIAL, "replay sent but NVR did not show it", metrics

    def _replay_window_closed(self, play_ok: int, replay_started: int) -> List[TraceEvent]:
        """NVR restarts and re-SETUPs between the forced PLAY and the first replayed packet"""
        trace = self._trace()
        first = next((e.t_us for e in trace.delivered("rtp")
                      if e.src == self.attacker_id and e.dst == self.nvr and e.t_us >= replay_started),
                     self.end_us)
        restarts = [e for e in trace.notes("restart", self.nvr) if play_ok < e.t_us < first]
        setups = [e for e in trace.sent("rtsp")
                  if e.src == self.nvr and (e.payload or b"").startswith(b"SETUP ") and play_ok < e.t_us < first]
        return sorted(restarts + setups, key=lambda e: e.id)

    def _judge_sniff(self, run: StepRun):
        tokens = sorted(hue.sniff_tokens(self._trace(), run.data.get('links', [])))
        verified = [r for r in self.attacker.http_log
                    if r.method == "GET" and r.path.endswith("/config") and r.status == 200
                    and isinstance(r.body, dict) and self._in_us(r.t_us, run, seconds(1))]
        run.evidence += [r.event_id for r in verified]
        metrics = {'tokens': tokens, 'verified': len(verified)}
        if not tokens:
            return Outcome.FAILED, "no token observed", metrics
        if verified:
            return Outcome.ACHIEVED, None, metrics
        return Outcome.PARTIAL, "token captured but not verified", metrics

    def _in_us(self, t_us: int, run: StepRun, grace_us: int = 0) -> bool:
        return run.t0 <= t_us <= run.t1 + grace_us

    def _judge_register(self, run: StepRun):
        issued = [e for e in self._trace().notes("token_issued", self.bridge)
                  if e.detail.get('requester') == self.attacker_id and self._in(e, run, seconds(1))]
        run.evidence += [e.id for e in issued]
        posts = [r for r in self.attacker.http_log if r.method == "POST" and self._in_us(r.t_us, run, seconds(1))]
        metrics = {'tokens_issued': [e.detail['token'] for e in issued]}
        if issued:
            return Outcome.ACHIEVED, None, metrics
        if posts:
            description = posts[0].body[0].get('error', {}).get('description') \
                if isinstance(posts[0].body, list) and posts[0].body else None
            return Outcome.FAILED, description or run.reason or "registration refused", metrics
        return Outcome.FAILED, run.reason or "no registration attempt answered", metrics

    def _light_on_at(self, light: int, t_us: int) -> bool:
        on = True
        for e in self._trace().notes("light_state", self.bridge):
            if e.t_us > t_us:
                break
            if e.detail.get('light') == light:
                on = e.detail['on']
        return on

    def _judge_light_off(self, run: StepRun):
        if run.reason:
            return Outcome.FAILED, run.reason, {}
        period = seconds(run.data['period_s'])
        light = run.params.light
        samples = list(range(run.t0 + period, run.t1 + 1, seconds(1)))
        lit = [t for t in samples if self._light_on_at(light, t)]
        offs = [e for e in self._trace().notes("light_state", self.bridge)
                if e.detail.get('light') == light and not e.detail['on'] and self._in(e, run)]
        run.evidence += [e.id for e in offs[:5]]
        metrics = {'samples': len(samples), 'samples_lit': len(lit)}
        if samples and not lit:
            return Outcome.ACHIEVED, None, metrics
        if offs:
            return Outcome.PARTIAL, "light came back on during the loop", metrics
        return Outcome.FAILED, "light never switched off", metrics

    def _judge_alert_blink(self, run: StepRun):
        if run.reason:
            return Outcome.FAILED, run.reason, {}
        blinks = [e for e in self._trace().notes("light_state", self.bridge)
                  if e.detail.get('alert') == run.params.mode and e.detail.get('light') == run.params.light
                  and self._in(e, run, seconds(1))]
        run.evidence += [e.id for e in blinks[:5]]
        metrics = {'alerts_started': len(blinks)}
        if blinks:
            return Outcome.ACHIEVED, None, metrics
        return Outcome.FAILED, "light never entered alert mode", metrics

    def _judge_reconfig(self, run: StepRun):
        if run.reason:
            return Outcome.FAILED, run.reason, {}
        changes = [e for e in self._trace().notes("netconfig", self.bridge) if self._in(e, run, seconds(1))]
        impact = [e for e in self._trace().of_kind("actor")
                  if e.detail.get('event') in ("bridge_unreachable", "request_ignored")
                  and changes and e.t_us > changes[0].t_us]
        run.evidence += [e.id for e in changes + impact[:5]]
        metrics = {'netconfig': {k: changes[-1].detail[k] for k in hue.NETCONFIG_FIELDS} if changes else None,
                   'stale_requests': len(impact)}
        if changes and impact:
            return Outcome.ACHIEVED, None, metrics
        if changes:
            return Outcome.PARTIAL, "bridge re-addressed but no client lost it", metrics
        return Outcome.FAILED, "bridge configuration unchanged", metrics

    def _judge_recon(self, run: StepRun):
        client_id = run.data.get('client_id')
        code = self.attacker.mqtt_connacks.get(client_id)
        topics = sorted(mqtt.enumerate_visible_topics(self._trace(), run.params.topic_filter,
                                                      observer=self.attacker_id))
        received = [e for e in self._trace().delivered("mqtt")
                    if e.dst == self.attacker_id and self._in(e, run)][:10]
        run.evidence += [e.id for e in received]
        metrics = {'filter': run.params.topic_filter, 'topics': topics}
        if code is None:
            return Outcome.FAILED, "broker never answered", metrics
        if code != mqtt.ConnackCode.ACCEPTED:
            return Outcome.FAILED, f"connect refused (code {code})", metrics
        if topics:
            return Outcome.ACHIEVED, None, metrics
        return Outcome.PARTIAL, "subscribed but nothing published", metrics

    def _legit_refusals(self, run: StepRun) -> List[TraceEvent]:
        return [e for e in self._trace().notes("connack")
                if e.src != self.attacker_id and e.detail.get('code') != mqtt.ConnackCode.ACCEPTED
                and self._in(e, run, seconds(self.settings.mqtt.reconnect_s))]

    def _judge_connect_flood(self, run: StepRun):
        refused = self._legit_refusals(run)
        run.evidence += [e.id for e in refused[:10]]
        metrics = {
            'connects_sent': run.data.get('sent', 0),
            'legit_refusals': len(refused),
            'first_refusal_after_s': round((refused[0].t_us - run.t0) / 1e6, 6) if refused else None,
        }
        if refused:
            return Outcome.ACHIEVED, None, metrics
        if run.data.get('sent'):
            return Outcome.PARTIAL, "broker kept admitting legitimate clients", metrics
        return Outcome.FAILED, "no CONNECT sent", metrics

    def _judge_payload_flood(self, run: StepRun):
        refused = self._legit_refusals(run)
        client_ids = set(run.data.get('client_ids', []))
        unacked = sum(len(self.attacker.mqtt_clients[c].pending_acks) for c in client_ids
                      if c in self.attacker.mqtt_clients)
        run.evidence += [e.id for e in refused[:10]]
        metrics = {'published': run.data.get('published', 0), 'unacknowledged': unacked,
                   'legit_refusals': len(refused)}
        if refused:
            return Outcome.ACHIEVED, None, metrics
        if unacked:
            return Outcome.PARTIAL, "broker shed flood traffic only", metrics
        if run.data.get('published'):
            return Outcome.PARTIAL, "broker absorbed the flood", metrics
        return Outcome.FAILED, "no flood connection admitted", metrics


def execute_scenario(world: World, scenario: Scenario) -> Tuple[Trace, AttackReport]:
    """Run a scenario in a prepared world and evaluate every step"""
    engine = AttackEngine(world, scenario)
    engine.install()
    trace = world.run_until(seconds(scenario.duration_s))
    steps = engine.evaluate()
    report = AttackReport(
        scenario=scenario.name,
        seed=world.seed,
        duration_s=scenario.duration_s,
        steps=steps,
        availability=round(availability(trace), 6) if world.topology.by_role(Role.NVR) else None,
        alerts=detect(trace, world.settings),
        trace_events=len(trace),
    )
    achieved = sum(1 for s in steps if s.outcome == Outcome.ACHIEVED)
    logger.info(f"Scenario {scenario.name}: {achieved}/{len(steps)} steps achieved, "
                f"{len(report.alerts)} alerts, {len(trace)} trace events")
    return trace, report


def run_scenario(scenario: Scenario, base_dir: Optional[Path] = None, seed: Optional[int] = None,
                 duration_s: Optional[float] = None,
                 settings: Optional[Settings] = None) -> Tuple[World, Trace, AttackReport]:
    """Build the scenario's world and execute it; seed/duration overrides replace the file values"""
    updates: Dict[str, Any] = {}
    if seed is not None:
        updates['seed'] = seed
    if duration_s is not None:
        updates['duration_s'] = duration_s
    if updates:
        scenario = scenario.model_copy(update=updates)
    topology, effective = resolve_scenario(scenario, base_dir, settings)
    world = build_world(topology, seed=scenario.seed, settings=effective)
    trace, report = execute_scenario(world, scenario)
    return world, trace, report


def footage_replay(world: World, capture_window: float, replay_delay_ms: Optional[int] = None,
                   horizon_s: float = 120.0, attacker: str = "attacker") -> AttackReport:
    """Four-stage replay from the camera-NVR link, starting now; the attacker is assumed on path"""
    topology = world.topology
    cameras, nvrs = topology.by_role(Role.CAMERA), topology.by_role(Role.NVR)
    video = topology.link_between(cameras[0].id, nvrs[0].id) if cameras and nvrs else None
    params: Dict[str, Any] = {'capture_window_s': capture_window}
    if replay_delay_ms is not None:
        params['replay_delay_ms'] = replay_delay_ms
    start_s = world.now / 1e6
    scenario = Scenario(
        name="footage-replay",
        seed=world.seed,
        duration_s=start_s + capture_window + horizon_s,
        attacker=attacker,
        vantage=Vantage(taps=[video.id] if video else []),
        steps=[AttackStep(kind=StepKind.FOOTAGE_REPLAY, params=params, t_start=start_s)],
    )
    engine = AttackEngine(world, scenario)
    nvr = world.actors.get(engine.nvr)
    if nvr is None or nvr.session.state != rtsp.SessionState.PLAYING:
        logger.warning("footage_replay called while the NVR is not PLAYING")
    engine.install()
    trace = world.run_until(seconds(scenario.duration_s))
    return AttackReport(scenario=scenario.name, seed=world.seed, duration_s=scenario.duration_s,
                        steps=engine.evaluate(), availability=round(availability(trace), 6),
                        alerts=detect(trace, world.settings), trace_events=len(trace))
