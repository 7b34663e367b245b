#!/usr/bin/env python3
"""
MQTT 3.1.1 broker and client models
Topic filters, QoS 0/1/2 handshakes, CONNECT admission and the broker
resource budget that makes connect and publish floods observable.

Packets travel inside simulator frames with a compact binary header:
    kind u8 | flags u8 | return_code u8 | packet_id u16 |
    len(client_id) u16 | len(topic) u16 | len(username) u16 | len(password) u16 | len(payload) u32
followed by the utf-8 strings and the payload in that order.
flags: bits 0-1 QoS, bit 2 DUP, bit 3 RETAIN.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .config import MqttSettings
from .errors import MqttProtocolError, TopicFilterError

logger = logging.getLogger(__name__)

# hard protocol limit; tests shrink it with monkeypatch
MAX_PAYLOAD_BYTES = 256 * 1024 * 1024

HEADER = struct.Struct("<BBBHHHHHI")

QOS_MULTIPLIER = {0: 1, 1: 2, 2: 4}


class PacketKind(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    DISCONNECT = 14


class ConnackCode(IntEnum):
    ACCEPTED = 0
    SERVER_UNAVAILABLE = 3
    BAD_CREDENTIALS = 4
    NOT_AUTHORIZED = 5


SUBACK_FAILURE = 0x80


@dataclass
class MqttPacket:
    kind: PacketKind
    client_id: str = ""
    topic: str = ""
    payload: bytes = b""
    qos: int = 0
    packet_id: int = 0
    return_code: int = 0
    username: Optional[str] = None
    password: Optional[str] = None
    dup: bool = False
    retain: bool = False


def encode_packet(pkt: MqttPacket) -> bytes:
    client_id = pkt.client_id.encode('utf-8')
    topic = pkt.topic.encode('utf-8')
    username = (pkt.username or "").encode('utf-8')
    password = (pkt.password or "").encode('utf-8')
    flags = (pkt.qos & 0x03) | (0x04 if pkt.dup else 0) | (0x08 if pkt.retain else 0)
    header = HEADER.pack(int(pkt.kind), flags, pkt.return_code, pkt.packet_id & 0xFFFF,
                         len(client_id), len(topic), len(username), len(password), len(pkt.payload))
    return header + client_id + topic + username + password + pkt.payload


def decode_packet(data: bytes) -> MqttPacket:
    if len(data) < HEADER.size:
        raise MqttProtocolError(f"truncated MQTT header ({len(data)} bytes)")
    kind, flags, rc, pid, n_client, n_topic, n_user, n_pass, n_payload = HEADER.unpack_from(data)
    try:
        kind = PacketKind(kind)
    except ValueError:
        raise MqttProtocolError(f"unknown MQTT packet type {kind}")
    offset = HEADER.size
    fields = []
    for n in (n_client, n_topic, n_user, n_pass, n_payload):
        fields.append(data[offset:offset + n])
        offset += n
    if offset != len(data):
        raise MqttProtocolError(f"MQTT length mismatch: header says {offset}, frame has {len(data)}")
    if flags & 0x03 == 0x03:
        raise MqttProtocolError("QoS 3 is reserved")
    client_id, topic, username, password, payload = fields
    return MqttPacket(
        kind=kind,
        client_id=client_id.decode('utf-8'),
        topic=topic.decode('utf-8'),
        payload=payload,
        qos=flags & 0x03,
        packet_id=pid,
        return_code=rc,
        username=username.decode('utf-8') if n_user else None,
        password=password.decode('utf-8') if n_pass else None,
        dup=bool(flags & 0x04),
        retain=bool(flags & 0x08),
    )


# -- topics ------------------------------------------------------------------------

def validate_topic_name(topic: str) -> None:
    if not topic:
        raise TopicFilterError("topic name must not be empty")
    if "+" in topic or "#" in topic:
        raise TopicFilterError(f"topic name contains a wildcard: {topic}")


def validate_filter(topic_filter: str) -> None:
    if not topic_filter:
        raise TopicFilterError("topic filter must not be empty")
    levels = topic_filter.split("/")
    for i, level in enumerate(levels):
        if "#" in level and (level != "#" or i != len(levels) - 1):
            raise TopicFilterError(f"'#' must be the whole last level: {topic_filter}")
        if "+" in level and level != "+":
            raise TopicFilterError(f"'+' must occupy a whole level: {topic_filter}")


def topic_matches(topic_filter: str, topic: str) -> bool:
    validate_filter(topic_filter)
    f_levels = topic_filter.split("/")
    t_levels = topic.split("/")
    if topic.startswith("$") and f_levels[0] in ("+", "#"):
        return False
    for i, level in enumerate(f_levels):
        if level == "#":
            return True
        if i >= len(t_levels):
            return False
        if level != "+" and level != t_levels[i]:
            return False
    return len(f_levels) == len(t_levels)


class TopicTree:
    """Subscription index keyed by filter level"""

    def __init__(self):
        self.children: Dict[str, "TopicTree"] = {}
        self.subscribers: Dict[str, int] = {}

    def subscribe(self, topic_filter: str, client_id: str, qos: int) -> None:
        validate_filter(topic_filter)
        node = self
        for level in topic_filter.split("/"):
            node = node.children.setdefault(level, TopicTree())
        node.subscribers[client_id] = qos

    def remove_client(self, client_id: str) -> None:
        self.subscribers.pop(client_id, None)
        for child in self.children.values():
            child.remove_client(client_id)

    def match(self, topic: str) -> Dict[str, int]:
        """client id -> highest subscribed QoS among filters matching topic"""
        out: Dict[str, int] = {}
        self._collect(topic.split("/"), 0, out, topic.startswith("$"))
        return out

    def _collect(self, levels: List[str], depth: int, out: Dict[str, int], system: bool) -> None:
        wildcard_ok = not (system and depth == 0)
        hash_node = self.children.get("#")
        if hash_node is not None and wildcard_ok:
            _merge(out, hash_node.subscribers)
        if depth == len(levels):
            _merge(out, self.subscribers)
            return
        exact = self.children.get(levels[depth])
        if exact is not None:
            exact._collect(levels, depth + 1, out, system)
        plus = self.children.get("+")
        if plus is not None and wildcard_ok:
            plus._collect(levels, depth + 1, out, system)


def _merge(out: Dict[str, int], subscribers: Dict[str, int]) -> None:
    for client_id, qos in subscribers.items():
        out[client_id] = max(qos, out.get(client_id, 0))


# -- broker --------------------------------------------------------------------------

@dataclass
class BudgetState:
    capacity: int = 10_000
    connect_cost: int = 50
    publish_base_cost: int = 5
    per_kb_cost: int = 1
    decay_per_tick: int = 100
    current_load: int = 0

    def publish_cost(self, payload_len: int, qos: int) -> int:
        size_cost = self.per_kb_cost * math.ceil(payload_len / 1024)
        return (self.publish_base_cost + size_cost) * QOS_MULTIPLIER[qos]

    def charge(self, cost: int) -> bool:
        """Admit and charge an operation; refused operations cost nothing"""
        if self.current_load + cost > self.capacity:
            return False
        self.current_load += cost
        return True

    def decay(self) -> None:
        self.current_load = max(0, self.current_load - self.decay_per_tick)


@dataclass
class BrokerSession:
    client_id: str
    subscriptions: Dict[str, int] = field(default_factory=dict)
    inflight_qos2: Set[int] = field(default_factory=set)
    # outbound packet id -> "PUBACK" | "PUBREC" | "PUBCOMP" awaited from the subscriber
    pending_acks: Dict[int, str] = field(default_factory=dict)
    next_packet_id: int = 1

    def allocate_id(self) -> int:
        pid = self.next_packet_id
        self.next_packet_id = pid % 0xFFFF + 1
        return pid


@dataclass
class PublishRecord:
    t_us: int
    client_id: str
    topic: str
    qos: int
    size: int


@dataclass
class BrokerState:
    budget: BudgetState = field(default_factory=BudgetState)
    sessions: Dict[str, BrokerSession] = field(default_factory=dict)
    retained: Dict[str, bytes] = field(default_factory=dict)
    tree: TopicTree = field(default_factory=TopicTree)
    allow_anonymous: bool = True
    credentials: Dict[str, str] = field(default_factory=dict)
    published: List[PublishRecord] = field(default_factory=list)
    refused_connects: int = 0
    refused_publishes: int = 0


def new_broker(settings: MqttSettings) -> BrokerState:
    budget = BudgetState(
        capacity=settings.capacity,
        connect_cost=settings.connect_cost,
        publish_base_cost=settings.publish_base_cost,
        per_kb_cost=settings.per_kb_cost,
        decay_per_tick=settings.decay_per_s * settings.tick_ms // 1000,
    )
    return BrokerState(budget=budget, allow_anonymous=settings.allow_anonymous,
                       credentials=dict(settings.credentials))


Outgoing = List[Tuple[str, MqttPacket]]


def _connect(broker: BrokerState, pkt: MqttPacket) -> Outgoing:
    def connack(code: ConnackCode) -> Outgoing:
        return [(pkt.client_id, MqttPacket(PacketKind.CONNACK, pkt.client_id, return_code=int(code)))]

    if not broker.budget.charge(broker.budget.connect_cost):
        broker.refused_connects += 1
        return connack(ConnackCode.SERVER_UNAVAILABLE)
    if pkt.username is None:
        if not broker.allow_anonymous:
            return connack(ConnackCode.NOT_AUTHORIZED)
    elif broker.credentials and broker.credentials.get(pkt.username) != pkt.password:
        return connack(ConnackCode.BAD_CREDENTIALS)
    _drop_session(broker, pkt.client_id)
    broker.sessions[pkt.client_id] = BrokerSession(pkt.client_id)
    return connack(ConnackCode.ACCEPTED)


def _drop_session(broker: BrokerState, client_id: str) -> None:
    if broker.sessions.pop(client_id, None) is not None:
        broker.tree.remove_client(client_id)


def _fan_out(broker: BrokerState, pkt: MqttPacket) -> Outgoing:
    out: Outgoing = []
    for client_id, sub_qos in sorted(broker.tree.match(pkt.topic).items()):
        session = broker.sessions.get(client_id)
        if session is None:
            continue
        qos = min(pkt.qos, sub_qos)
        pid = 0
        if qos > 0:
            pid = session.allocate_id()
            session.pending_acks[pid] = "PUBACK" if qos == 1 else "PUBREC"
        out.append((client_id, MqttPacket(PacketKind.PUBLISH, client_id, pkt.topic, pkt.payload,
                                          qos=qos, packet_id=pid)))
    return out


def _publish(broker: BrokerState, session: BrokerSession, pkt: MqttPacket, now: int) -> Outgoing:
    if len(pkt.payload) > MAX_PAYLOAD_BYTES:
        logger.warning(f"MQTT payload of {len(pkt.payload)} bytes from {pkt.client_id} exceeds limit")
        _drop_session(broker, pkt.client_id)
        return [(pkt.client_id, MqttPacket(PacketKind.DISCONNECT, pkt.client_id))]
    validate_topic_name(pkt.topic)
    if pkt.qos == 2 and pkt.packet_id in session.inflight_qos2:
        return [(pkt.client_id, MqttPacket(PacketKind.PUBREC, pkt.client_id, packet_id=pkt.packet_id))]
    if not broker.budget.charge(broker.budget.publish_cost(len(pkt.payload), pkt.qos)):
        broker.refused_publishes += 1
        return []
    broker.published.append(PublishRecord(now, pkt.client_id, pkt.topic, pkt.qos, len(pkt.payload)))
    if pkt.retain:
        broker.retained[pkt.topic] = pkt.payload
    out = _fan_out(broker, pkt)
    if pkt.qos == 1:
        out.append((pkt.client_id, MqttPacket(PacketKind.PUBACK, pkt.client_id, packet_id=pkt.packet_id)))
    elif pkt.qos == 2:
        session.inflight_qos2.add(pkt.packet_id)
        out.append((pkt.client_id, MqttPacket(PacketKind.PUBREC, pkt.client_id, packet_id=pkt.packet_id)))
    return out


def broker_handle(broker: BrokerState, pkt: MqttPacket, now: int) -> Tuple[BrokerState, Outgoing]:
    """Process one client packet; outgoing packets are addressed by client id"""
    if pkt.kind == PacketKind.CONNECT:
        return broker, _connect(broker, pkt)
    session = broker.sessions.get(pkt.client_id)
    if session is None:
        logger.debug(f"MQTT {pkt.kind.name} from unconnected client {pkt.client_id} ignored")
        return broker, []
    if pkt.kind in (PacketKind.PUBLISH, PacketKind.SUBSCRIBE) and pkt.qos not in QOS_MULTIPLIER:
        logger.info(f"MQTT client {pkt.client_id} sent {pkt.kind.name} with QoS {pkt.qos}")
        _drop_session(broker, pkt.client_id)
        return broker, [(pkt.client_id, MqttPacket(PacketKind.DISCONNECT, pkt.client_id))]

    if pkt.kind == PacketKind.PUBLISH:
        try:
            return broker, _publish(broker, session, pkt, now)
        except TopicFilterError as e:
            logger.info(f"MQTT client {pkt.client_id} sent bad topic: {e}")
            _drop_session(broker, pkt.client_id)
            return broker, [(pkt.client_id, MqttPacket(PacketKind.DISCONNECT, pkt.client_id))]
    if pkt.kind == PacketKind.SUBSCRIBE:
        try:
            broker.tree.subscribe(pkt.topic, pkt.client_id, pkt.qos)
        except TopicFilterError as e:
            logger.info(f"MQTT client {pkt.client_id} rejected filter: {e}")
            return broker, [(pkt.client_id, MqttPacket(PacketKind.SUBACK, pkt.client_id, pkt.topic,
                                                       packet_id=pkt.packet_id,
                                                       return_code=SUBACK_FAILURE))]
        session.subscriptions[pkt.topic] = pkt.qos
        out = [(pkt.client_id, MqttPacket(PacketKind.SUBACK, pkt.client_id, pkt.topic,
                                          packet_id=pkt.packet_id, return_code=pkt.qos))]
        for topic, payload in sorted(broker.retained.items()):
            if topic_matches(pkt.topic, topic):
                out.append((pkt.client_id, MqttPacket(PacketKind.PUBLISH, pkt.client_id, topic,
                                                      payload, retain=True)))
        return broker, out
    if pkt.kind == PacketKind.PUBREL:
        session.inflight_qos2.discard(pkt.packet_id)
        return broker, [(pkt.client_id, MqttPacket(PacketKind.PUBCOMP, pkt.client_id,
                                                   packet_id=pkt.packet_id))]
    if pkt.kind == PacketKind.PUBACK:
        session.pending_acks.pop(pkt.packet_id, None)
        return broker, []
    if pkt.kind == PacketKind.PUBREC:
        if session.pending_acks.get(pkt.packet_id) in ("PUBREC", "PUBCOMP"):
            session.pending_acks[pkt.packet_id] = "PUBCOMP"
        return broker, [(pkt.client_id, MqttPacket(PacketKind.PUBREL, pkt.client_id,
                                                   packet_id=pkt.packet_id))]
    if pkt.kind == PacketKind.PUBCOMP:
        session.pending_acks.pop(pkt.packet_id, None)
        return broker, []
    if pkt.kind == PacketKind.DISCONNECT:
        _drop_session(broker, pkt.client_id)
        return broker, []
    logger.debug(f"MQTT broker ignoring {pkt.kind.name} from {pkt.client_id}")
    return broker, []


def broker_tick(broker: BrokerState) -> BrokerState:
    broker.budget.decay()
    return broker


# -- client --------------------------------------------------------------------------

@dataclass
class ClientSession:
    client_id: str
    connected: bool = False
    last_return_code: Optional[int] = None
    subscriptions: Dict[str, int] = field(default_factory=dict)
    inbound_qos2: Set[int] = field(default_factory=set)
    pending_acks: Dict[int, str] = field(default_factory=dict)
    next_packet_id: int = 1

    def allocate_id(self) -> int:
        pid = self.next_packet_id
        self.next_packet_id = pid % 0xFFFF + 1
        return pid


def client_handle(client: ClientSession, pkt: MqttPacket) -> Tuple[ClientSession, List[MqttPacket], List[MqttPacket]]:
    """Subscriber side: returns (client, replies to broker, application deliveries)"""
    replies: List[MqttPacket] = []
    delivered: List[MqttPacket] = []
    cid = client.client_id
    if pkt.kind == PacketKind.CONNACK:
        client.last_return_code = pkt.return_code
        client.connected = pkt.return_code == ConnackCode.ACCEPTED
    elif pkt.kind == PacketKind.SUBACK:
        if pkt.return_code != SUBACK_FAILURE:
            client.subscriptions[pkt.topic] = pkt.return_code
    elif pkt.kind == PacketKind.PUBLISH:
        if pkt.qos == 0:
            delivered.append(pkt)
        elif pkt.qos == 1:
            delivered.append(pkt)
            replies.append(MqttPacket(PacketKind.PUBACK, cid, packet_id=pkt.packet_id))
        else:
            if pkt.packet_id not in client.inbound_qos2:
                client.inbound_qos2.add(pkt.packet_id)
                delivered.append(pkt)
            replies.append(MqttPacket(PacketKind.PUBREC, cid, packet_id=pkt.packet_id))
    elif pkt.kind == PacketKind.PUBREL:
        client.inbound_qos2.discard(pkt.packet_id)
        replies.append(MqttPacket(PacketKind.PUBCOMP, cid, packet_id=pkt.packet_id))
    elif pkt.kind == PacketKind.PUBREC:
        client.pending_acks[pkt.packet_id] = "PUBCOMP"
        replies.append(MqttPacket(PacketKind.PUBREL, cid, packet_id=pkt.packet_id))
    elif pkt.kind in (PacketKind.PUBACK, PacketKind.PUBCOMP):
        client.pending_acks.pop(pkt.packet_id, None)
    elif pkt.kind == PacketKind.DISCONNECT:
        client.connected = False
    return client, replies, delivered


def publish_packet(client: ClientSession, topic: str, payload: bytes, qos: int = 0,
                   retain: bool = False) -> MqttPacket:
    pid = 0
    if qos > 0:
        pid = client.allocate_id()
        client.pending_acks[pid] = "PUBACK" if qos == 1 else "PUBREC"
    return MqttPacket(PacketKind.PUBLISH, client.client_id, topic, payload, qos=qos,
                      packet_id=pid, retain=retain)


def enumerate_visible_topics(trace_or_broker, topic_filter: str,
                             observer: Optional[str] = None) -> Set[str]:
    """Published topic names matching the filter, from broker records or a trace"""
    validate_filter(topic_filter)
    topics: Iterable[str]
    if isinstance(trace_or_broker, BrokerState):
        topics = [r.topic for r in trace_or_broker.published]
    else:
        topics = []
        for event in trace_or_broker.delivered("mqtt"):
            if observer is not None and event.dst != observer:
                continue
            try:
                pkt = decode_packet(event.payload)
            except MqttProtocolError:
                continue
            if pkt.kind == PacketKind.PUBLISH:
                topics.append(pkt.topic)
    return {t for t in topics if topic_matches(topic_filter, t)}
