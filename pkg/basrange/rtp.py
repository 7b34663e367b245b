#!/usr/bin/env python3
"""
RTP media model
Fixed 16-byte packet codec, the camera's frame source, and the NVR sink
that assembles frames and decides what the operator's screen shows.

Wire layout (little-endian, 16 bytes):
    ssrc u32 | seq u16 | timestamp u32 | flags u8 | label u8 | frame u32
flags bit 0 is the marker (last packet of a frame), bit 1 marks an RTCP report.
The label is one ASCII character naming the source ('C' camera, 'A' attacker).
"""

import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Set, Tuple

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<IHIBBI")
PACKET_SIZE = HEADER.size
SEQ_MOD = 1 << 16
CLOCK_RATE = 90_000

FLAG_MARKER = 0x01
FLAG_RTCP = 0x02

LABEL_CAMERA = "C"
LABEL_ATTACKER = "A"


@dataclass(frozen=True)
class RtpPacket:
    ssrc: int
    seq: int
    timestamp: int
    marker: bool = False
    label: str = LABEL_CAMERA
    frame: int = 0
    rtcp: bool = False

    @property
    def payload_tag(self) -> Tuple[str, int]:
        return self.label, self.frame


def encode_packet(pkt: RtpPacket) -> bytes:
    flags = (FLAG_MARKER if pkt.marker else 0) | (FLAG_RTCP if pkt.rtcp else 0)
    return HEADER.pack(pkt.ssrc & 0xFFFFFFFF, pkt.seq % SEQ_MOD, pkt.timestamp & 0xFFFFFFFF,
                       flags, ord(pkt.label[0]), pkt.frame & 0xFFFFFFFF)


def decode_packet(data: bytes) -> RtpPacket:
    if len(data) != PACKET_SIZE:
        raise ValueError(f"RTP packet must be {PACKET_SIZE} bytes, got {len(data)}")
    ssrc, seq, ts, flags, label, frame = HEADER.unpack(data)
    return RtpPacket(ssrc, seq, ts, bool(flags & FLAG_MARKER), chr(label), frame,
                     bool(flags & FLAG_RTCP))


@dataclass
class RtpSource:
    """One media stream; emits a frame per tick while playing"""
    ssrc: int
    label: str = LABEL_CAMERA
    packets_per_frame: int = 3
    frame_interval_ms: int = 100
    playing: bool = False
    frame: int = 0
    next_seq: int = 0
    last_tick: Optional[int] = None

    @property
    def ts_step(self) -> int:
        return CLOCK_RATE * self.frame_interval_ms // 1000


def emit_frame_packets(source: RtpSource, tick: int) -> List[RtpPacket]:
    if not source.playing:
        return []
    ts = (source.frame * source.ts_step) & 0xFFFFFFFF
    packets = []
    for i in range(source.packets_per_frame):
        packets.append(RtpPacket(
            ssrc=source.ssrc,
            seq=source.next_seq,
            timestamp=ts,
            marker=i == source.packets_per_frame - 1,
            label=source.label,
            frame=source.frame,
        ))
        source.next_seq = (source.next_seq + 1) % SEQ_MOD
    source.frame += 1
    source.last_tick = tick
    return packets


def rtcp_report(source: RtpSource) -> RtpPacket:
    """Sender report stand-in; carried on the wire, never interpreted"""
    return RtpPacket(ssrc=source.ssrc, seq=source.next_seq,
                     timestamp=(source.frame * source.ts_step) & 0xFFFFFFFF,
                     label=source.label, frame=source.frame, rtcp=True)


class RenderStatus(str, Enum):
    LIVE = "LIVE"
    FROZEN = "FROZEN"
    FOREIGN = "FOREIGN"
    CORRUPTED = "CORRUPTED"
    NO_SIGNAL = "NO_SIGNAL"


@dataclass
class CompletedFrame:
    ssrc: int
    timestamp: int
    label: str
    frame: int


@dataclass
class SinkState:
    expected_ssrc: Optional[int] = None
    window_us: int = 1_000_000
    packets_per_frame: int = 3
    reorder_depth: int = 4
    max_misorder: int = 100
    dominance: float = 0.95
    window_counts: Dict[int, int] = field(default_factory=dict)
    last_seq: Dict[int, int] = field(default_factory=dict)
    last_complete_frame: Optional[Tuple[str, int]] = None
    completed: Deque[CompletedFrame] = field(default_factory=lambda: deque(maxlen=512))
    late_packets: int = 0
    resyncs: int = 0
    _partial: Dict[Tuple[int, int], Set[int]] = field(default_factory=dict)
    _markers: Set[Tuple[int, int]] = field(default_factory=set)
    _done: Deque[Tuple[int, int]] = field(default_factory=lambda: deque(maxlen=512))

    PARTIAL_LIMIT = 64


def _seq_position(sink: SinkState, pkt: RtpPacket) -> str:
    """Classify a packet against the highest seq seen for its ssrc"""
    highest = sink.last_seq.get(pkt.ssrc)
    if highest is None:
        sink.last_seq[pkt.ssrc] = pkt.seq
        return "new"
    diff = (highest - pkt.seq) % SEQ_MOD
    if diff == 0:
        return "duplicate"
    if diff >= SEQ_MOD // 2:
        sink.last_seq[pkt.ssrc] = pkt.seq
        return "ahead"
    if diff <= sink.reorder_depth:
        return "reordered"
    if diff > sink.max_misorder:
        sink.last_seq[pkt.ssrc] = pkt.seq
        sink.resyncs += 1
        return "resync"
    return "late"


def sink_ingest(sink: SinkState, pkt: RtpPacket) -> SinkState:
    """Count a packet in the current window and advance frame assembly"""
    if pkt.rtcp:
        return sink
    sink.window_counts[pkt.ssrc] = sink.window_counts.get(pkt.ssrc, 0) + 1
    if _seq_position(sink, pkt) == "late":
        sink.late_packets += 1
        return sink

    key = (pkt.ssrc, pkt.timestamp)
    if key in sink._done:
        return sink
    seqs = sink._partial.setdefault(key, set())
    seqs.add(pkt.seq)
    if pkt.marker:
        sink._markers.add(key)
    if len(seqs) >= sink.packets_per_frame and key in sink._markers:
        del sink._partial[key]
        sink._markers.discard(key)
        sink._done.append(key)
        sink.last_complete_frame = (pkt.label, pkt.frame)
        sink.completed.append(CompletedFrame(pkt.ssrc, pkt.timestamp, pkt.label, pkt.frame))
    elif len(sink._partial) > sink.PARTIAL_LIMIT:
        oldest = next(iter(sink._partial))
        del sink._partial[oldest]
        sink._markers.discard(oldest)
    return sink


def render_status(sink: SinkState, window_end: int) -> RenderStatus:
    """What the screen shows for the window ending at window_end"""
    total = sum(sink.window_counts.values())
    if total == 0:
        return RenderStatus.FROZEN if sink.last_complete_frame is not None else RenderStatus.NO_SIGNAL
    ssrc, count = max(sorted(sink.window_counts.items()), key=lambda item: item[1])
    if count >= sink.dominance * total:
        # without an announced SSRC nothing renders LIVE
        if sink.expected_ssrc is not None and ssrc == sink.expected_ssrc:
            return RenderStatus.LIVE
        return RenderStatus.FOREIGN
    return RenderStatus.CORRUPTED


def close_window(sink: SinkState, window_end: int) -> Tuple[RenderStatus, Dict[int, int]]:
    """Render the window, then reset its counters; returns (status, counts)"""
    status = render_status(sink, window_end)
    counts = dict(sink.window_counts)
    sink.window_counts.clear()
    return status, counts
