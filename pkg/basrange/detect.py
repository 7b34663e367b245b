#!/usr/bin/env python3
"""
Trace analysis
Video availability and one detection heuristic per attack family, computed
as a fold over a finished trace.
"""

import json
import logging
from collections import defaultdict
from enum import Enum
from typing import Any, Dict, List, Optional, Set, Tuple

from pydantic import BaseModel

from . import hue, mqtt, rtp, rtsp
from .config import Settings
from .errors import MqttProtocolError, RtspParseError
from .simnet import Trace, TraceEvent

logger = logging.getLogger(__name__)


class Detector(str, Enum):
    SESSION_CHURN = "SESSION_CHURN"
    SEQ_ANOMALY = "SEQ_ANOMALY"
    SSRC_MIX = "SSRC_MIX"
    WILDCARD_SUB = "WILDCARD_SUB"
    CONNECT_SURGE = "CONNECT_SURGE"
    TOKEN_REUSE_NEW_ENDPOINT = "TOKEN_REUSE_NEW_ENDPOINT"
    BRIDGE_RECONFIG = "BRIDGE_RECONFIG"


class Alert(BaseModel):
    t_us: int
    detector: Detector
    subject: str
    evidence: List[int]
    detail: Dict[str, Any] = {}


def availability(trace: Trace, stream: Optional[str] = None) -> float:
    """Fraction of LIVE render windows that start at or after the first PLAYING"""
    renders = trace.notes("render", device=stream)
    if stream is None and renders:
        stream = renders[0].src
        renders = [e for e in renders if e.src == stream]
    playing = [e for e in trace.states(stream, "rtsp-client") if e.detail.get('to') == "PLAYING"]
    if not playing:
        logger.warning(f"Stream {stream or '<none>'} never reached PLAYING; availability is 0")
        return 0.0
    t_playing = playing[0].t_us
    windows = []
    previous_end = 0
    for event in renders:
        if previous_end >= t_playing:
            windows.append(event.detail.get('status'))
        previous_end = event.t_us
    if not windows:
        return 0.0
    return sum(1 for status in windows if status == rtp.RenderStatus.LIVE.value) / len(windows)


def _rtsp(event: TraceEvent) -> Optional[rtsp.RtspMessage]:
    try:
        return rtsp.parse_message(event.payload)
    except RtspParseError:
        return None


def _mqtt(event: TraceEvent) -> Optional[mqtt.MqttPacket]:
    try:
        return mqtt.decode_packet(event.payload)
    except MqttProtocolError:
        return None


def _session_churn(trace: Trace, cfg) -> List[Alert]:
    alerts = []
    window_us = int(cfg.churn_window_s * 1_000_000)
    setups: Dict[str, List[TraceEvent]] = defaultdict(list)
    seen: Set[Tuple[str, int]] = set()
    last_alert: Dict[str, int] = {}
    for event in trace.sent("rtsp"):
        msg = _rtsp(event)
        if msg is None or msg.method != rtsp.Method.OPTIONS or (event.src, msg.cseq) in seen:
            continue
        seen.add((event.src, msg.cseq))
        recent = [e for e in setups[event.src] if e.t_us > event.t_us - window_us] + [event]
        setups[event.src] = recent
        if len(recent) > cfg.churn_threshold and event.t_us > last_alert.get(event.src, -window_us - 1) + window_us:
            last_alert[event.src] = event.t_us
            alerts.append(Alert(t_us=event.t_us, detector=Detector.SESSION_CHURN, subject=event.src,
                                evidence=[e.id for e in recent], detail={'setups': len(recent)}))
    return alerts


def _rtsp_anomalies(trace: Trace, cfg) -> List[Alert]:
    alerts = []
    runs: Dict[str, Tuple[Optional[str], List[int]]] = {}
    fired: Set[Tuple[str, Optional[str]]] = set()
    for event in trace.of_kind("frame_sent", "frame_delivered"):
        if event.proto != "rtsp":
            continue
        msg = _rtsp(event)
        if msg is None:
            continue
        if event.kind == "frame_sent" and msg.kind == rtsp.MessageKind.REQUEST:
            method, ids = runs.get(event.src, (None, []))
            ids = ids + [event.id] if method == msg.method else [event.id]
            runs[event.src] = (msg.method, ids)
            if len(ids) >= cfg.retransmit_threshold and (event.src, msg.method) not in fired:
                fired.add((event.src, msg.method))
                alerts.append(Alert(t_us=event.t_us, detector=Detector.SEQ_ANOMALY, subject=event.src,
                                    evidence=list(ids), detail={'pattern': "unanswered requests",
                                                                'method': msg.method}))
        elif event.kind == "frame_delivered" and msg.kind == rtsp.MessageKind.RESPONSE:
            if msg.status is not None and 200 <= msg.status < 300:
                method, _ = runs.get(event.dst, (None, []))
                runs[event.dst] = (None, [])
                fired.discard((event.dst, method))
            elif msg.status in (454, 455):
                alerts.append(Alert(t_us=event.t_us, detector=Detector.SEQ_ANOMALY, subject=event.dst,
                                    evidence=[event.id], detail={'pattern': "session state error",
                                                                 'status': msg.status}))
    return alerts


def _rtp_anomalies(trace: Trace, settings: Settings) -> List[Alert]:
    alerts = []
    depth = settings.rtp.reorder_depth
    gap = settings.detection.rtp_gap_threshold
    highest: Dict[Tuple[str, int], int] = {}
    flagged: Set[Tuple[str, int, str]] = set()
    for event in trace.delivered("rtp"):
        try:
            pkt = rtp.decode_packet(event.payload)
        except ValueError:
            continue
        if pkt.rtcp:
            continue
        key = (event.dst, pkt.ssrc)
        top = highest.get(key)
        if top is None:
            highest[key] = pkt.seq
            continue
        diff = (pkt.seq - top) % rtp.SEQ_MOD
        if diff == 0:
            continue
        if diff < rtp.SEQ_MOD // 2:
            highest[key] = pkt.seq
            pattern = "forward gap" if diff >= gap else None
        else:
            pattern = "backward jump" if rtp.SEQ_MOD - diff > depth else None
            if pattern:
                highest[key] = pkt.seq
        if pattern and (event.dst, pkt.ssrc, pattern) not in flagged:
            flagged.add((event.dst, pkt.ssrc, pattern))
            alerts.append(Alert(t_us=event.t_us, detector=Detector.SEQ_ANOMALY, subject=event.dst,
                                evidence=[event.id], detail={'pattern': pattern, 'ssrc': f"{pkt.ssrc:08X}"}))
    return alerts


def _ssrc_mix(trace: Trace) -> List[Alert]:
    """Every CORRUPTED window; FOREIGN windows only when a stream turns foreign"""
    alerts = []
    previous: Dict[str, Optional[str]] = {}
    for event in trace.notes("render"):
        status = event.detail.get('status')
        corrupted = status == rtp.RenderStatus.CORRUPTED.value
        turned_foreign = status == rtp.RenderStatus.FOREIGN.value and previous.get(event.src) != status
        if corrupted or turned_foreign:
            alerts.append(Alert(t_us=event.t_us, detector=Detector.SSRC_MIX, subject=event.src,
                                evidence=[event.id], detail={'status': status,
                                                             'counts': event.detail.get('counts', {})}))
        previous[event.src] = status
    return alerts


def _wildcard_subscriptions(trace: Trace, cfg) -> List[Alert]:
    alerts = []
    allow = set(cfg.wildcard_allowlist)
    for event in trace.delivered("mqtt"):
        pkt = _mqtt(event)
        if pkt is None or pkt.kind != mqtt.PacketKind.SUBSCRIBE:
            continue
        if ("#" in pkt.topic or "+" in pkt.topic) and pkt.client_id not in allow:
            alerts.append(Alert(t_us=event.t_us, detector=Detector.WILDCARD_SUB, subject=pkt.client_id,
                                evidence=[event.id], detail={'filter': pkt.topic, 'device': event.src}))
    return alerts


def _connect_surge(trace: Trace, cfg) -> List[Alert]:
    buckets: Dict[Tuple[str, int], List[int]] = defaultdict(list)
    for event in trace.delivered("mqtt"):
        pkt = _mqtt(event)
        if pkt is not None and pkt.kind == mqtt.PacketKind.CONNECT:
            buckets[(event.dst, event.t_us // 1_000_000)].append(event.id)
    alerts = []
    for broker in sorted({b for b, _ in buckets}):
        seconds = sorted(s for b, s in buckets if b == broker)
        surging = False
        for second in range(seconds[0], seconds[-1] + 1):
            count = len(buckets.get((broker, second), []))
            trailing = sum(len(buckets.get((broker, s), []))
                           for s in range(second - cfg.connect_trailing_s, second)) / cfg.connect_trailing_s
            surge = count >= cfg.connect_surge_min and count > cfg.connect_surge_factor * max(trailing, 1.0)
            if surge and not surging:
                ids = buckets[(broker, second)]
                alerts.append(Alert(t_us=second * 1_000_000, detector=Detector.CONNECT_SURGE, subject=broker,
                                    evidence=ids[:50], detail={'connects': count, 'trailing_avg': trailing}))
            surging = surge
    return alerts


def _token_reuse(trace: Trace) -> List[Alert]:
    alerts = []
    endpoints: Dict[str, str] = {}
    reported: Set[Tuple[str, str]] = set()
    for event in trace.delivered("http"):
        match = hue.API_PATH.match(event.payload or b"")
        if not match:
            continue
        token = match.group(1).decode('ascii')
        first = endpoints.setdefault(token, event.src)
        if event.src != first and (token, event.src) not in reported:
            reported.add((token, event.src))
            alerts.append(Alert(t_us=event.t_us, detector=Detector.TOKEN_REUSE_NEW_ENDPOINT, subject=event.dst,
                                evidence=[event.id], detail={'token': token, 'first_endpoint': first,
                                                             'new_endpoint': event.src}))
    return alerts


def _bridge_reconfig(trace: Trace) -> List[Alert]:
    """
    PUT /config requests the bridge accepted and that changed its network
    settings. The bridge answers and records its netconfig note inside the
    handling of the delivered request, so the three events follow each other.
    """
    alerts = []
    pending: Dict[str, Dict[str, Any]] = {}
    for event in trace:
        if event.kind == "frame_delivered" and event.proto == "http" and event.dst is not None:
            pending.pop(event.dst, None)
            requested = _netconfig_request(event.payload)
            if requested:
                pending[event.dst] = {'request': event, 'fields': requested, 'status': None}
        elif event.kind == "frame_sent" and event.proto == "http" and event.src in pending:
            entry = pending[event.src]
            if entry['status'] is None:
                try:
                    entry['status'], _ = hue.parse_response(event.payload or b"")
                except (ValueError, IndexError):
                    entry['status'] = 0
        elif event.kind == "actor" and event.detail.get('event') == "netconfig" and event.src in pending:
            entry = pending.pop(event.src)
            changed = sorted(set(event.detail.get('changed', [])) & entry['fields'])
            if entry['status'] == 200 and changed:
                request = entry['request']
                alerts.append(Alert(t_us=event.t_us, detector=Detector.BRIDGE_RECONFIG, subject=event.src,
                                    evidence=[request.id, event.id],
                                    detail={'fields': changed, 'requester': request.src}))
    return alerts


def _netconfig_request(payload: Optional[bytes]) -> Set[str]:
    try:
        req = hue.parse_request(payload or b"")
    except ValueError:
        return set()
    if req.method != "PUT" or not req.path.rstrip("/").endswith("/config"):
        return set()
    try:
        body = json.loads(req.body) if req.body else {}
    except json.JSONDecodeError:
        return set()
    return {k for k in body if k in hue.NETCONFIG_FIELDS} if isinstance(body, dict) else set()


def detect(trace: Trace, settings: Optional[Settings] = None) -> List[Alert]:
    """Run every detector; alerts ordered by time, then detector name"""
    settings = settings or Settings()
    cfg = settings.detection
    alerts = (_session_churn(trace, cfg) + _rtsp_anomalies(trace, cfg) + _rtp_anomalies(trace, settings)
              + _ssrc_mix(trace) + _wildcard_subscriptions(trace, cfg) + _connect_surge(trace, cfg)
              + _token_reuse(trace) + _bridge_reconfig(trace))
    alerts.sort(key=lambda a: (a.t_us, a.detector.value, a.subject, a.evidence))
    logger.info(f"Detection produced {len(alerts)} alerts")
    return alerts
