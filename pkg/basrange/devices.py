#!/usr/bin/env python3
"""
Device actors for the building network
Camera, NVR, MQTT broker and clients, Hue bridge and its app, and the
world builder that attaches the right actor to every device role.
"""

import copy
import logging
from typing import Any, Dict, List, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, ValidationError

from . import hue, mqtt, rtp, rtsp
from .config import Settings, format_validation_error
from .errors import ConfigurationError, MqttProtocolError, RtspParseError
from .simnet import Actor, Frame, World, millis, seconds
from .topology import DeviceSpec, Role, Topology

logger = logging.getLogger(__name__)


class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid")
    ip: Optional[str] = None


class CameraParams(_Params):
    timeout_s: Optional[int] = None
    auth_mode: Optional[str] = None
    protected_methods: Optional[List[str]] = None


class NvrParams(_Params):
    camera: str = "camera"
    client_port: Optional[int] = None


class PublishSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    topic: str
    interval_s: float = 5.0
    qos: int = 0


class MqttClientParams(_Params):
    broker: str = "iot-gateway"
    client_id: Optional[str] = None
    publish: List[PublishSpec] = []
    subscribe: List[str] = []
    # sleepy clients connect, publish once, and disconnect every cycle
    sleepy: bool = False
    cycle_s: float = 3.0
    username: Optional[str] = None
    password: Optional[str] = None


class HueBridgeParams(_Params):
    tokens: List[str] = []
    lights: List[str] = ["Hue color lamp 1", "Hue color lamp 2", "Hue color lamp 3"]


class HueAppParams(_Params):
    bridge: str = "hue-bridge"
    token: str
    poll_s: Optional[float] = None


class AttackerParams(_Params):
    pass


P = TypeVar("P", bound=BaseModel)


def device_params(device: DeviceSpec, model: Type[P]) -> P:
    try:
        return model.model_validate(device.params)
    except ValidationError as e:
        raise ConfigurationError(format_validation_error(e, f"devices.{device.id}.params")) from e


class CameraActor(Actor):
    """RTSP server plus RTP source"""

    def __init__(self, device_id: str, settings: Settings, params: CameraParams):
        super().__init__(device_id)
        overrides = {k: v for k, v in params.model_dump(exclude={'ip'}).items() if v is not None}
        self.rtsp_settings = settings.rtsp.model_copy(update=overrides)
        self.rtp_settings = settings.rtp
        self.session = rtsp.new_server_session(self.rtsp_settings)
        self.source = rtp.RtpSource(ssrc=0, label=rtp.LABEL_CAMERA,
                                    packets_per_frame=settings.rtp.packets_per_frame,
                                    frame_interval_ms=settings.rtp.frame_interval_ms)
        self.stream_dest: Optional[str] = None
        self.stream_port: Optional[int] = None
        self._stream_epoch = 0

    def on_frame(self, world: World, frame: Frame) -> None:
        if frame.proto != "rtsp":
            return
        try:
            msg = rtsp.parse_message(frame.payload)
        except RtspParseError as e:
            logger.info(f"{self.device_id}: bad RTSP from {frame.src}: {e}")
            world.send(self.device_id, frame.src,
                       rtsp.serialize_message(rtsp.bad_request_response(frame.payload)), "rtsp")
            return
        old = self.session.state
        self.session, reply = rtsp.server_step(self.session, msg, world.now, world.rng)
        if reply is not None:
            world.send(self.device_id, frame.src, rtsp.serialize_message(reply), "rtsp")
        self._after_transition(world, old, reason=msg.method or "response", peer=frame.src)
        if self.session.state in (rtsp.SessionState.READY, rtsp.SessionState.PLAYING):
            expires = self.session.last_activity + self.session.timeout_s * rtsp.US_PER_S + 1
            world.schedule(expires, self._check_expiry)

    def _check_expiry(self, world: World) -> None:
        old = self.session.state
        self.session = rtsp.server_expire(self.session, world.now)
        if self.session.state != old:
            world.note(self.device_id, "session_timeout", session=self.session.session_id)
            self._after_transition(world, old, reason="timeout")

    def _after_transition(self, world: World, old: rtsp.SessionState, reason: str,
                          peer: Optional[str] = None) -> None:
        new = self.session.state
        world.transition(self.device_id, "rtsp-server", old.value, new.value, reason=reason)
        if new == rtsp.SessionState.PLAYING and old != rtsp.SessionState.PLAYING:
            self._start_stream(world, peer)
        elif old == rtsp.SessionState.PLAYING and new != rtsp.SessionState.PLAYING:
            self.source.playing = False
            self._stream_epoch += 1

    def _start_stream(self, world: World, peer: Optional[str]) -> None:
        self.source.ssrc = self.session.ssrc or 0
        self.source.playing = True
        self.stream_dest = peer
        self.stream_port = self.session.client_port
        self._stream_epoch += 1
        epoch = self._stream_epoch
        world.call_later(millis(self.rtp_settings.frame_interval_ms), lambda w: self._tick(w, epoch))
        world.call_later(seconds(self.rtp_settings.rtcp_interval_s), lambda w: self._rtcp(w, epoch))

    def _tick(self, world: World, epoch: int) -> None:
        if epoch != self._stream_epoch or not self.source.playing:
            return
        for pkt in rtp.emit_frame_packets(self.source, world.now):
            world.send(self.device_id, self.stream_dest, rtp.encode_packet(pkt), "rtp", dport=self.stream_port)
        world.call_later(millis(self.rtp_settings.frame_interval_ms), lambda w: self._tick(w, epoch))

    def _rtcp(self, world: World, epoch: int) -> None:
        if epoch != self._stream_epoch or not self.source.playing:
            return
        world.send(self.device_id, self.stream_dest, rtp.encode_packet(rtp.rtcp_report(self.source)),
                   "rtp", dport=self.stream_port + 1)
        world.call_later(seconds(self.rtp_settings.rtcp_interval_s), lambda w: self._rtcp(w, epoch))


class NvrActor(Actor):
    """RTSP client plus RTP sink with a per-window render model"""

    def __init__(self, device_id: str, settings: Settings, params: NvrParams):
        super().__init__(device_id)
        rtsp_settings = settings.rtsp
        if params.client_port is not None:
            rtsp_settings = rtsp_settings.model_copy(update={'client_port': params.client_port})
        self.camera = params.camera
        self.session = rtsp.new_client_session(rtsp_settings)
        self.window_us = seconds(settings.rtp.window_s)
        self.sink = rtp.SinkState(
            window_us=self.window_us,
            packets_per_frame=settings.rtp.packets_per_frame,
            reorder_depth=settings.rtp.reorder_depth,
            max_misorder=settings.rtp.max_misorder,
            dominance=settings.rtp.dominance,
        )
        self._stream_up_epoch: Optional[int] = None

    def start(self, world: World) -> None:
        self._step(world, rtsp.START)
        world.call_later(self.window_us, self._render)

    def _step(self, world: World, event) -> None:
        old = self.session.state
        self.session, actions = rtsp.client_step(self.session, event, world.now)
        for msg in actions.send:
            world.send(self.device_id, self.camera, rtsp.serialize_message(msg), "rtsp")
        for timer in actions.timers:
            world.call_later(timer.delay_us,
                             lambda w, t=timer: self._step(w, rtsp.TimerEvent(t.kind, t.token)),
                             label=f"rtsp-{timer.kind}", owner=self.device_id)
        if actions.restarted:
            world.note(self.device_id, "restart", reason=actions.restarted)
        world.transition(self.device_id, "rtsp-client", old.value, self.session.state.value)
        if self.session.state == rtsp.SessionState.PLAYING and old != rtsp.SessionState.PLAYING:
            self.sink.expected_ssrc = self.session.ssrc

    def on_frame(self, world: World, frame: Frame) -> None:
        if frame.proto == "rtsp":
            try:
                msg = rtsp.parse_message(frame.payload)
            except RtspParseError as e:
                logger.info(f"{self.device_id}: bad RTSP from {frame.src}: {e}")
                return
            self._step(world, msg)
        elif frame.proto == "rtp":
            if frame.dport != self.session.client_port:
                return
            try:
                pkt = rtp.decode_packet(frame.payload)
            except ValueError:
                return
            if pkt.rtcp:
                return
            rtp.sink_ingest(self.sink, pkt)
            if self.session.state == rtsp.SessionState.PLAYING:
                self.session.media_seen = True
                if self._stream_up_epoch != self.session.epoch:
                    self._stream_up_epoch = self.session.epoch
                    world.note(self.device_id, "stream_up", ssrc=f"{pkt.ssrc:08X}")

    def _render(self, world: World) -> None:
        status, counts = rtp.close_window(self.sink, world.now)
        frame = self.sink.last_complete_frame
        world.note(self.device_id, "render", status=status.value,
                   counts={f"{ssrc:08X}": n for ssrc, n in sorted(counts.items())},
                   frame=list(frame) if frame else None,
                   expected=f"{self.sink.expected_ssrc:08X}" if self.sink.expected_ssrc is not None else None)
        world.call_later(self.window_us, self._render)


class MqttBrokerActor(Actor):
    """Broker state machine with a periodic budget decay"""

    def __init__(self, device_id: str, settings: Settings):
        super().__init__(device_id)
        self.broker = mqtt.new_broker(settings.mqtt)
        self.tick_us = millis(settings.mqtt.tick_ms)
        self.client_devices: Dict[str, str] = {}

    def start(self, world: World) -> None:
        world.call_later(self.tick_us, self._tick)

    def _tick(self, world: World) -> None:
        mqtt.broker_tick(self.broker)
        world.call_later(self.tick_us, self._tick)

    def on_frame(self, world: World, frame: Frame) -> None:
        if frame.proto != "mqtt":
            return
        try:
            pkt = mqtt.decode_packet(frame.payload)
        except MqttProtocolError as e:
            logger.info(f"{self.device_id}: undecodable MQTT from {frame.src}: {e}")
            return
        if pkt.kind == mqtt.PacketKind.CONNECT:
            self.client_devices[pkt.client_id] = frame.src
        elif self.client_devices.get(pkt.client_id) != frame.src:
            # packets must come from the device that opened the session
            return
        self.broker, outgoing = mqtt.broker_handle(self.broker, pkt, world.now)
        for client_id, out in outgoing:
            device = self.client_devices.get(client_id)
            if device is None:
                continue
            world.send(self.device_id, device, mqtt.encode_packet(out), "mqtt")
            if out.kind == mqtt.PacketKind.DISCONNECT:
                self.client_devices.pop(client_id, None)
        if pkt.kind == mqtt.PacketKind.DISCONNECT:
            self.client_devices.pop(pkt.client_id, None)


class MqttClientActor(Actor):
    """Sensor, thermostat or dashboard talking to the broker"""

    def __init__(self, device_id: str, settings: Settings, params: MqttClientParams):
        super().__init__(device_id)
        self.params = params
        self.broker = params.broker
        self.client = mqtt.ClientSession(params.client_id or device_id)
        self.reconnect_us = seconds(settings.mqtt.reconnect_s)
        self.received: List[mqtt.MqttPacket] = []
        self._counter = 0
        self._connecting = False
        self._generation = 0

    def start(self, world: World) -> None:
        if self.params.sleepy:
            self._sleepy_cycle(world)
        else:
            self._connect(world)

    def _send(self, world: World, pkt: mqtt.MqttPacket) -> None:
        world.send(self.device_id, self.broker, mqtt.encode_packet(pkt), "mqtt")

    def _connect(self, world: World) -> None:
        if self.client.connected or self._connecting:
            return
        self._connecting = True
        self._send(world, mqtt.MqttPacket(mqtt.PacketKind.CONNECT, self.client.client_id,
                                          username=self.params.username, password=self.params.password))
        world.call_later(self.reconnect_us, self._connect_timeout)

    def _connect_timeout(self, world: World) -> None:
        if self._connecting and not self.client.connected:
            self._connecting = False
            if not self.params.sleepy:
                self._connect(world)

    def _reading(self, topic: str) -> bytes:
        self._counter += 1
        base = 45 if topic.endswith("humidity") else 21
        return f"{base + self._counter % 4}.{self._counter % 10}".encode('ascii')

    def _publish(self, world: World, spec: PublishSpec) -> None:
        if not self.client.connected:
            return
        pkt = mqtt.publish_packet(self.client, spec.topic, self._reading(spec.topic), spec.qos)
        self._send(world, pkt)

    def _publish_loop(self, world: World, spec: PublishSpec, generation: int) -> None:
        if generation != self._generation or not self.client.connected:
            return
        self._publish(world, spec)
        world.call_later(seconds(spec.interval_s), lambda w: self._publish_loop(w, spec, generation))

    def on_frame(self, world: World, frame: Frame) -> None:
        if frame.proto != "mqtt":
            return
        try:
            pkt = mqtt.decode_packet(frame.payload)
        except MqttProtocolError:
            return
        was_connected = self.client.connected
        self.client, replies, delivered = mqtt.client_handle(self.client, pkt)
        for reply in replies:
            self._send(world, reply)
        self.received.extend(delivered)

        if pkt.kind == mqtt.PacketKind.CONNACK:
            self._connecting = False
            world.note(self.device_id, "connack", client=self.client.client_id, code=pkt.return_code)
            if self.client.connected:
                self._on_connected(world)
            elif not self.params.sleepy:
                world.call_later(self.reconnect_us, self._connect)
        elif pkt.kind == mqtt.PacketKind.PUBCOMP and self.params.sleepy and not self.client.pending_acks:
            self._send(world, mqtt.MqttPacket(mqtt.PacketKind.DISCONNECT, self.client.client_id))
            self.client.connected = False
        elif pkt.kind == mqtt.PacketKind.DISCONNECT and was_connected and not self.params.sleepy:
            world.call_later(self.reconnect_us, self._connect)

    def _on_connected(self, world: World) -> None:
        self._generation += 1
        for i, topic_filter in enumerate(self.params.subscribe):
            self._send(world, mqtt.MqttPacket(mqtt.PacketKind.SUBSCRIBE, self.client.client_id,
                                              topic_filter, qos=1, packet_id=i + 1))
        if self.params.sleepy:
            for spec in self.params.publish:
                self._publish(world, spec)
            if not self.client.pending_acks:
                self._send(world, mqtt.MqttPacket(mqtt.PacketKind.DISCONNECT, self.client.client_id))
                self.client.connected = False
            return
        generation = self._generation
        for spec in self.params.publish:
            world.call_later(seconds(spec.interval_s), lambda w, s=spec: self._publish_loop(w, s, generation))

    def _sleepy_cycle(self, world: World) -> None:
        if self.client.connected:
            # last cycle's handshake never completed
            self._send(world, mqtt.MqttPacket(mqtt.PacketKind.DISCONNECT, self.client.client_id))
            self.client.connected = False
            self.client.pending_acks.clear()
        self._connect(world)
        world.call_later(seconds(self.params.cycle_s), self._sleepy_cycle)


class HueBridgeActor(Actor):
    """REST bridge; answers only frames addressed to its current IP"""

    def __init__(self, device_id: str, settings: Settings, params: HueBridgeParams):
        super().__init__(device_id)
        net = hue.NetConfig(ipaddress=params.ip) if params.ip else hue.NetConfig()
        self.bridge = hue.new_bridge(params.lights, params.tokens, net,
                                     linkbutton_reset_s=settings.hue.linkbutton_reset_s,
                                     select_s=settings.hue.select_duration_s,
                                     lselect_s=settings.hue.lselect_duration_s)

    def start(self, world: World) -> None:
        world.set_address(self.device_id, self.bridge.netconfig.ipaddress)

    def _snapshot(self) -> Dict[int, tuple]:
        return {i: (l.on, l.alert) for i, l in self.bridge.lights.items()}

    def _report_lights(self, world: World, before: Dict[int, tuple]) -> None:
        for light_id, (on, alert) in self._snapshot().items():
            if before.get(light_id) != (on, alert):
                world.note(self.device_id, "light_state", light=light_id, on=on, alert=alert)

    def _tick(self, world: World) -> None:
        before = self._snapshot()
        hue.bridge_tick(self.bridge, world.now)
        self._report_lights(world, before)

    def on_frame(self, world: World, frame: Frame) -> None:
        if frame.proto != "http":
            return
        if frame.addr is not None and frame.addr != self.bridge.netconfig.ipaddress:
            world.note(self.device_id, "request_ignored", src=frame.src, addr=frame.addr)
            return
        try:
            req = hue.parse_request(frame.payload)
        except ValueError as e:
            logger.info(f"{self.device_id}: {e}")
            reply = hue.HttpExchange("", "", status=400, response_body="[]")
            world.send(self.device_id, frame.src, hue.encode_response(reply), "http")
            return
        before = self._snapshot()
        tokens_before = set(self.bridge.whitelist)
        old_net = copy.copy(self.bridge.netconfig)
        self.bridge, reply = hue.handle_request(
            self.bridge, req, world.now,
            token_factory=lambda: world.token(hue.TOKEN_LENGTH, hue.TOKEN_ALPHABET))
        world.send(self.device_id, frame.src, hue.encode_response(reply), "http")

        for token in sorted(set(self.bridge.whitelist) - tokens_before):
            world.note(self.device_id, "token_issued", token=token, requester=frame.src)
        self._report_lights(world, before)
        net = self.bridge.netconfig
        if net != old_net:
            changed = [f for f in hue.NETCONFIG_FIELDS if getattr(net, f) != getattr(old_net, f)]
            world.note(self.device_id, "netconfig", ipaddress=net.ipaddress, dhcp=net.dhcp,
                       netmask=net.netmask, gateway=net.gateway, previous=old_net.ipaddress, changed=changed)
            world.set_address(self.device_id, net.ipaddress)
        deadlines = [l.alert_until for l in self.bridge.lights.values() if l.alert_until is not None]
        if self.bridge.linkbutton_deadline is not None:
            deadlines.append(self.bridge.linkbutton_deadline)
        for deadline in sorted(set(deadlines)):
            if deadline >= world.now:
                world.schedule(deadline, self._tick)


class HueAppActor(Actor):
    """Controller app polling the bridge with its configured token"""

    def __init__(self, device_id: str, settings: Settings, params: HueAppParams):
        super().__init__(device_id)
        self.bridge = params.bridge
        self.token = params.token
        self.poll_us = seconds(params.poll_s if params.poll_s is not None else settings.hue.poll_s)
        self.bridge_addr: Optional[str] = None
        self._awaiting = False
        self._reachable = True

    def start(self, world: World) -> None:
        world.call_later(self.poll_us, self._poll)

    def _poll(self, world: World) -> None:
        if self.bridge_addr is None:
            self.bridge_addr = world.address_of(self.bridge)
        if self._awaiting and self._reachable:
            self._reachable = False
            world.note(self.device_id, "bridge_unreachable", addr=self.bridge_addr)
        self._awaiting = True
        world.send(self.device_id, self.bridge, hue.encode_request("GET", f"/api/{self.token}/lights"),
                   "http", addr=self.bridge_addr)
        world.call_later(self.poll_us, self._poll)

    def on_frame(self, world: World, frame: Frame) -> None:
        if frame.proto == "http":
            self._awaiting = False
            self._reachable = True


def build_world(topology: Topology, seed: int = 0, settings: Optional[Settings] = None) -> World:
    """World with one actor per device role; attacker devices are left to the attack engine"""
    world = World(topology, seed=seed, settings=settings)
    s = world.settings
    for device in topology.devices:
        actor: Optional[Actor] = None
        if device.role == Role.CAMERA:
            actor = CameraActor(device.id, s, device_params(device, CameraParams))
        elif device.role == Role.NVR:
            params = device_params(device, NvrParams)
            if not topology.has_device(params.camera):
                raise ConfigurationError(f"devices.{device.id}.params.camera: unknown device {params.camera}")
            actor = NvrActor(device.id, s, params)
        elif device.role == Role.MQTT_BROKER:
            actor = MqttBrokerActor(device.id, s)
        elif device.role == Role.MQTT_CLIENT:
            actor = MqttClientActor(device.id, s, device_params(device, MqttClientParams))
        elif device.role == Role.HUE_BRIDGE:
            actor = HueBridgeActor(device.id, s, device_params(device, HueBridgeParams))
        elif device.role == Role.HUE_APP:
            actor = HueAppActor(device.id, s, device_params(device, HueAppParams))
        if actor is not None:
            world.attach(actor)
    logger.debug(f"Built world for {topology.name} with {len(world.actors)} actors, seed {seed}")
    return world
