#!/usr/bin/env python3
"""
Discrete-event network engine
Virtual links between device actors, a deterministic event loop, and the
interposer layer where on-path attack primitives are installed.
"""

import base64
import heapq
import json
import logging
import random
import re
import string
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

from .config import Settings
from .errors import ConfigurationError
from .topology import LinkMode, Topology

logger = logging.getLogger(__name__)

SimTime = int  # simulated microseconds since epoch 0

US_PER_S = 1_000_000


def seconds(value: float) -> SimTime:
    return int(round(value * US_PER_S))


def millis(value: float) -> SimTime:
    return int(round(value * 1000))


class Verdict(str, Enum):
    DELIVERED = "DELIVERED"
    DROPPED = "DROPPED"
    TAMPERED = "TAMPERED"
    INJECTED = "INJECTED"


class Action(str, Enum):
    DROP = "DROP"
    TAMPER = "TAMPER"
    DELAY = "DELAY"
    INJECT = "INJECT"
    PASS = "PASS"


@dataclass
class Frame:
    id: int
    src: str
    dst: str
    link: str
    payload: bytes
    sent_at: SimTime
    proto: str = ""
    dport: Optional[int] = None
    addr: Optional[str] = None
    delivered_at: Optional[SimTime] = None
    verdict: Optional[Verdict] = None
    original: Optional[bytes] = None


@dataclass
class Matcher:
    """Predicate over (src, dst, protocol, payload regex); None fields match anything"""
    src: Optional[str] = None
    dst: Optional[str] = None
    proto: Optional[str] = None
    pattern: Optional[bytes] = None

    def matches(self, frame: Frame) -> bool:
        if self.src is not None and frame.src != self.src:
            return False
        if self.dst is not None and frame.dst != self.dst:
            return False
        if self.proto is not None and frame.proto != self.proto:
            return False
        if self.pattern is not None and re.search(self.pattern, frame.payload, re.MULTILINE) is None:
            return False
        return True

    def describe(self) -> Dict[str, Any]:
        return {
            'src': self.src,
            'dst': self.dst,
            'proto': self.proto,
            'pattern': self.pattern.decode('latin-1') if self.pattern is not None else None,
        }


@dataclass
class InterposerRule:
    link: str
    matcher: Matcher = field(default_factory=Matcher)
    action: Action = Action.PASS
    # TAMPER: regex substitutions applied in order over the serialized payload
    substitutions: List[Tuple[bytes, bytes]] = field(default_factory=list)
    delay_us: SimTime = 0
    # INJECT: extra frames sent to the matched frame's destination
    inject_payload: bytes = b""
    inject_count: int = 1
    inject_spacing_us: SimTime = 0
    inject_src: str = "attacker"
    probability: float = 1.0
    id: Optional[int] = None
    hit_count: int = 0

    def tamper(self, payload: bytes) -> bytes:
        for pattern, replacement in self.substitutions:
            payload = re.sub(pattern, replacement, payload, flags=re.MULTILINE)
        return payload


@dataclass
class DeliveryOutcome:
    frame_id: int
    verdict: Verdict
    payload: bytes
    delivered_at: Optional[SimTime]
    rules_hit: List[int] = field(default_factory=list)


@dataclass
class TraceEvent:
    id: int
    t_us: SimTime
    kind: str
    src: Optional[str] = None
    dst: Optional[str] = None
    link: Optional[str] = None
    verdict: Optional[str] = None
    proto: Optional[str] = None
    payload: Optional[bytes] = None
    frame_id: Optional[int] = None
    detail: Dict[str, Any] = field(default_factory=dict)

    def to_record(self, payload_limit: int) -> Dict[str, Any]:
        detail = dict(self.detail)
        payload_b64 = None
        if self.payload is not None:
            data = self.payload
            if len(data) > payload_limit:
                detail['payload_len'] = len(data)
                data = data[:payload_limit]
            payload_b64 = base64.b64encode(data).decode('ascii')
        if self.frame_id is not None:
            detail['frame'] = self.frame_id
        return {
            'id': self.id,
            't_us': self.t_us,
            'kind': self.kind,
            'src': self.src,
            'dst': self.dst,
            'link': self.link,
            'verdict': self.verdict,
            'proto': self.proto,
            'payload_b64': payload_b64,
            'detail': detail,
        }


class Trace:
    """Totally ordered event log of one world"""

    def __init__(self):
        self.events: List[TraceEvent] = []

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __getitem__(self, index: int) -> TraceEvent:
        return self.events[index]

    def of_kind(self, *kinds: str) -> List[TraceEvent]:
        return [e for e in self.events if e.kind in kinds]

    def delivered(self, proto: Optional[str] = None) -> List[TraceEvent]:
        """frame_delivered events, optionally for one protocol"""
        return [e for e in self.events
                if e.kind == "frame_delivered" and (proto is None or e.proto == proto)]

    def sent(self, proto: Optional[str] = None) -> List[TraceEvent]:
        return [e for e in self.events
                if e.kind == "frame_sent" and (proto is None or e.proto == proto)]

    def notes(self, event: Optional[str] = None, device: Optional[str] = None) -> List[TraceEvent]:
        """Actor observations recorded with World.note"""
        return [e for e in self.events
                if e.kind == "actor"
                and (event is None or e.detail.get('event') == event)
                and (device is None or e.src == device)]

    def states(self, device: Optional[str] = None, machine: Optional[str] = None) -> List[TraceEvent]:
        return [e for e in self.events
                if e.kind == "state"
                and (device is None or e.src == device)
                and (machine is None or e.detail.get('machine') == machine)]

    def to_jsonl(self, payload_limit: int = 2048) -> str:
        lines = [json.dumps(e.to_record(payload_limit), sort_keys=True, separators=(',', ':'))
                 for e in self.events]
        return "\n".join(lines) + ("\n" if lines else "")

    def write_jsonl(self, path: Path, payload_limit: int = 2048) -> None:
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(self.to_jsonl(payload_limit))


class Actor:
    """Something that lives on a device and reacts to frames and timers"""

    def __init__(self, device_id: str):
        self.device_id = device_id

    def start(self, world: "World") -> None:
        pass

    def on_frame(self, world: "World", frame: Frame) -> None:
        pass


TapCallback = Callable[["World", Frame], None]


class World:
    """One simulated building network: topology, actors, clock, trace"""

    def __init__(self, topology: Topology, seed: int = 0, settings: Optional[Settings] = None):
        self.topology = topology
        self.seed = seed
        self.settings = settings or Settings()
        self.rng = random.Random(seed)
        self.now: SimTime = 0
        self.trace = Trace()
        self.actors: Dict[str, Actor] = {}
        self.rules: Dict[str, List[InterposerRule]] = {l.id: [] for l in topology.links}
        self.taps: Dict[str, List[Tuple[int, TapCallback]]] = {l.id: [] for l in topology.links}
        self.addresses: Dict[str, str] = {
            d.id: str(d.params['ip']) for d in topology.devices if 'ip' in d.params
        }
        self._latency: Dict[str, SimTime] = {}
        default_latency = millis(self.settings.sim.link_latency_ms)
        for link in topology.links:
            self._latency[link.id] = (millis(link.latency_ms)
                                      if link.latency_ms is not None else default_latency)
        self._queue: List[Tuple[SimTime, int, Callable[["World"], None], Optional[str], Optional[str]]] = []
        self._seq = 0
        self._frame_ids = 0
        self._rule_ids = 0
        self._tap_ids = 0
        self._started = False

    # -- actors and timers -------------------------------------------------

    def attach(self, actor: Actor) -> Actor:
        if not self.topology.has_device(actor.device_id):
            raise ConfigurationError(f"unknown device id {actor.device_id}")
        self.actors[actor.device_id] = actor
        return actor

    def schedule(self, at: SimTime, callback: Callable[["World"], None],
                 label: Optional[str] = None, owner: Optional[str] = None) -> None:
        """Run callback at simulated time `at`; labelled timers appear in the trace"""
        if at < self.now:
            raise ValueError(f"cannot schedule at {at} before current time {self.now}")
        self._seq += 1
        heapq.heappush(self._queue, (at, self._seq, callback, label, owner))

    def call_later(self, delay: SimTime, callback: Callable[["World"], None],
                   label: Optional[str] = None, owner: Optional[str] = None) -> None:
        self.schedule(self.now + max(0, delay), callback, label, owner)

    def token(self, length: int, alphabet: str = string.hexdigits[:16]) -> str:
        return ''.join(self.rng.choice(alphabet) for _ in range(length))

    # -- trace -------------------------------------------------------------

    def record(self, kind: str, **fields: Any) -> int:
        event = TraceEvent(id=len(self.trace.events), t_us=self.now, kind=kind, **fields)
        self.trace.events.append(event)
        return event.id

    def note(self, device: str, event: str, **detail: Any) -> int:
        """Record an actor observation (render status, refused connect, ...)"""
        detail['event'] = event
        return self.record("actor", src=device, detail=detail)

    def transition(self, device: str, machine: str, old: str, new: str, **detail: Any) -> Optional[int]:
        if old == new:
            return None
        detail.update({'machine': machine, 'from': old, 'to': new})
        return self.record("state", src=device, detail=detail)

    # -- addressing ----------------------------------------------------------

    def address_of(self, device_id: str) -> Optional[str]:
        return self.addresses.get(device_id)

    def set_address(self, device_id: str, addr: str) -> None:
        self.addresses[device_id] = addr

    # -- links -------------------------------------------------------------

    def resolve_link(self, src: str, dst: str) -> str:
        link = self.topology.link_between(src, dst)
        if link is None:
            raise ConfigurationError(f"no link between {src} and {dst}")
        return link.id

    def install_interposer(self, rule: InterposerRule) -> int:
        if rule.link not in self.rules:
            raise ConfigurationError(f"unknown link id {rule.link}")
        self._rule_ids += 1
        rule.id = self._rule_ids
        self.rules[rule.link].append(rule)
        logger.debug(f"Installed interposer {rule.id} {rule.action.value} on {rule.link}")
        return rule.id

    def remove_interposer(self, rule_id: int) -> Optional[InterposerRule]:
        for rules in self.rules.values():
            for rule in rules:
                if rule.id == rule_id:
                    rules.remove(rule)
                    return rule
        return None

    def add_tap(self, link: str, callback: TapCallback) -> int:
        if link not in self.taps:
            raise ConfigurationError(f"unknown link id {link}")
        self._tap_ids += 1
        self.taps[link].append((self._tap_ids, callback))
        return self._tap_ids

    def remove_tap(self, tap_id: int) -> None:
        for taps in self.taps.values():
            taps[:] = [(i, cb) for i, cb in taps if i != tap_id]

    # -- frames --------------------------------------------------------------

    def _new_frame(self, src: str, dst: str, link: str, payload: bytes, proto: str,
                   dport: Optional[int], addr: Optional[str]) -> Frame:
        self._frame_ids += 1
        return Frame(id=self._frame_ids, src=src, dst=dst, link=link, payload=bytes(payload),
                     sent_at=self.now, proto=proto, dport=dport, addr=addr)

    def send(self, src: str, dst: str, payload: bytes, proto: str,
             dport: Optional[int] = None, addr: Optional[str] = None,
             link: Optional[str] = None) -> Frame:
        """Put a frame from a device actor on the wire"""
        link = link or self.resolve_link(src, dst)
        if link not in self.rules:
            raise ConfigurationError(f"unknown link id {link}")
        frame = self._new_frame(src, dst, link, payload, proto, dport, addr)
        self.record("frame_sent", src=src, dst=dst, link=link, proto=proto,
                    payload=frame.payload, frame_id=frame.id)
        self.deliver(frame)
        return frame

    def inject(self, link: str, src: str, dst: str, payload: bytes, proto: str,
               dport: Optional[int] = None, addr: Optional[str] = None,
               at: Optional[SimTime] = None) -> Optional[Frame]:
        """Attacker-originated frame; bypasses interposers and taps"""
        if link not in self.rules:
            raise ConfigurationError(f"unknown link id {link}")
        if at is not None and at > self.now:
            self.schedule(at, lambda w: w.inject(link, src, dst, payload, proto, dport, addr))
            return None
        frame = self._new_frame(src, dst, link, payload, proto, dport, addr)
        self.record("frame_sent", src=src, dst=dst, link=link, proto=proto,
                    payload=frame.payload, frame_id=frame.id, detail={'injected': True})
        self._schedule_arrival(frame, Verdict.INJECTED, self.now + self._latency[link])
        return frame

    def deliver(self, frame: Frame) -> DeliveryOutcome:
        """Evaluate taps and interposer rules for a frame and schedule its arrival"""
        if frame.link not in self.rules:
            raise ConfigurationError(f"unknown link id {frame.link}")
        for _, tap in list(self.taps[frame.link]):
            tap(self, frame)

        link_spec = self.topology.link(frame.link)
        if link_spec.mode == LinkMode.LOSSY and link_spec.loss > 0 and self.rng.random() < link_spec.loss:
            return self._drop(frame, None, reason="loss")

        verdict = Verdict.DELIVERED
        extra_delay = 0
        hits: List[int] = []
        injects: List[InterposerRule] = []
        for rule in list(self.rules[frame.link]):
            if not rule.matcher.matches(frame):
                continue
            if rule.probability < 1.0 and self.rng.random() >= rule.probability:
                continue
            rule.hit_count += 1
            hits.append(rule.id)
            if rule.action == Action.DROP:
                outcome = self._drop(frame, rule.id, reason="rule")
                outcome.rules_hit = hits
                return outcome
            if rule.action == Action.TAMPER:
                rewritten = rule.tamper(frame.payload)
                if rewritten != frame.payload:
                    if frame.original is None:
                        frame.original = frame.payload
                    self.record("frame_tampered", src=frame.src, dst=frame.dst, link=frame.link,
                                proto=frame.proto, payload=rewritten, frame_id=frame.id,
                                detail={'rule': rule.id,
                                        'original_b64': base64.b64encode(frame.payload).decode('ascii')})
                    frame.payload = rewritten
                    verdict = Verdict.TAMPERED
            elif rule.action == Action.DELAY:
                extra_delay += rule.delay_us
            elif rule.action == Action.INJECT:
                injects.append(rule)

        arrival = self.now + self._latency[frame.link] + extra_delay
        self._schedule_arrival(frame, verdict, arrival)
        for rule in injects:
            for i in range(rule.inject_count):
                at = arrival + rule.inject_spacing_us * (i + 1)
                self.schedule(at, lambda w, r=rule, f=frame: w.inject(
                    f.link, r.inject_src, f.dst, r.inject_payload, f.proto, f.dport, f.addr))
        return DeliveryOutcome(frame.id, verdict, frame.payload, arrival, hits)

    def _drop(self, frame: Frame, rule_id: Optional[int], reason: str) -> DeliveryOutcome:
        frame.verdict = Verdict.DROPPED
        self.record("frame_dropped", src=frame.src, dst=frame.dst, link=frame.link,
                    verdict=Verdict.DROPPED.value, proto=frame.proto, frame_id=frame.id,
                    detail={'rule': rule_id, 'reason': reason})
        return DeliveryOutcome(frame.id, Verdict.DROPPED, frame.payload, None,
                               [rule_id] if rule_id is not None else [])

    def _schedule_arrival(self, frame: Frame, verdict: Verdict, at: SimTime) -> None:
        def arrive(world: "World") -> None:
            frame.delivered_at = world.now
            frame.verdict = verdict
            world.record("frame_delivered", src=frame.src, dst=frame.dst, link=frame.link,
                         verdict=verdict.value, proto=frame.proto, payload=frame.payload,
                         frame_id=frame.id)
            actor = world.actors.get(frame.dst)
            if actor is not None:
                actor.on_frame(world, frame)
        self.schedule(at, arrive, owner=frame.dst)

    # -- loop ----------------------------------------------------------------

    def run_until(self, t_end: SimTime) -> Trace:
        """Process every event with time <= t_end in (time, insertion) order"""
        if t_end < self.now:
            raise ValueError(f"t_end {t_end} is before current time {self.now}")
        if not self._started:
            # actor starts queue behind anything already scheduled for now, e.g. attack steps at t=0
            self._started = True
            for actor in list(self.actors.values()):
                self.schedule(self.now, lambda w, a=actor: a.start(w), owner=actor.device_id)
        while self._queue and self._queue[0][0] <= t_end:
            at, _, callback, label, owner = heapq.heappop(self._queue)
            self.now = at
            if label is not None:
                self.record("timer", src=owner, detail={'label': label})
            self._guarded(owner, callback)
        self.now = t_end
        return self.trace

    def _guarded(self, owner: Optional[str], callback: Callable[["World"], None]) -> None:
        try:
            callback(self)
        except Exception as e:
            logger.error(f"Actor fault on {owner} at {self.now}us: {type(e).__name__}: {e}")
            self.record("actor_fault", src=owner, detail={'error': f"{type(e).__name__}: {e}"})


def install_interposer(world: World, rule: InterposerRule) -> int:
    return world.install_interposer(rule)


def deliver(world: World, frame: Frame) -> DeliveryOutcome:
    return world.deliver(frame)


def run_until(world: World, t_end: SimTime) -> Trace:
    return world.run_until(t_end)
