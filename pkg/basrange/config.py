#!/usr/bin/env python3
"""
Settings for the building network range
Every calibration constant lives here with its default; files can override any of them.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigurationError

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SimSettings(_Section):
    """Event engine defaults"""
    link_latency_ms: float = 1.0
    # exported payload_b64 is cut to this many bytes; the in-memory trace keeps everything
    trace_payload_limit: int = 2048


class RtspSettings(_Section):
    """Camera server and NVR client timings"""
    timeout_s: int = Field(60, gt=0)
    keepalive_fraction: float = Field(0.5, gt=0, lt=1)
    retry_interval_s: float = Field(2.0, gt=0)
    realm: str = "camera"
    username: str = "root"
    password: str = "pass"
    auth_mode: str = "DIGEST"
    protected_methods: List[str] = ["DESCRIBE", "SETUP", "PLAY"]
    server_port: int = 6970
    client_port: int = 50100
    uri: str = "rtsp://camera/axis-media/media.amp"


class RtpSettings(_Section):
    """Media source and render model"""
    packets_per_frame: int = Field(3, ge=1)
    frame_interval_ms: int = Field(100, gt=0)
    window_s: float = Field(1.0, gt=0)
    dominance: float = Field(0.95, gt=0.5, le=1.0)
    reorder_depth: int = 4
    max_misorder: int = 100
    rtcp_interval_s: float = 5.0


class MqttSettings(_Section):
    """Broker budget calibration"""
    capacity: int = 10_000
    connect_cost: int = 50
    publish_base_cost: int = 5
    per_kb_cost: int = 1
    decay_per_s: int = 1_000
    tick_ms: int = 100
    allow_anonymous: bool = True
    credentials: Dict[str, str] = {}
    reconnect_s: float = 5.0


class HueSettings(_Section):
    """Bridge timers"""
    linkbutton_reset_s: float = 30.0
    select_duration_s: float = 1.0
    lselect_duration_s: float = 15.0
    poll_s: float = 5.0


class AttackSettings(_Section):
    """Defaults used when a step leaves a parameter out"""
    light_off_period_s: float = 2.0
    tamper_port: int = 50000
    rtp_flood_rate: int = 30
    connect_flood_rate: int = 500
    payload_flood_rate: int = 300
    payload_flood_size: int = 4096
    payload_flood_connections: int = 50
    replay_delay_ms: int = 1


class DetectionSettings(_Section):
    """Detector thresholds"""
    churn_threshold: int = 2
    churn_window_s: float = 300.0
    retransmit_threshold: int = 3
    rtp_gap_threshold: int = 30
    connect_surge_factor: float = 10.0
    connect_surge_min: int = 20
    connect_trailing_s: int = 10
    wildcard_allowlist: List[str] = ["iot-dashboard"]


class Settings(_Section):
    sim: SimSettings = SimSettings()
    rtsp: RtspSettings = RtspSettings()
    rtp: RtpSettings = RtpSettings()
    mqtt: MqttSettings = MqttSettings()
    hue: HueSettings = HueSettings()
    attacks: AttackSettings = AttackSettings()
    detection: DetectionSettings = DetectionSettings()

    def merged(self, overrides: Optional[Dict[str, Any]]) -> "Settings":
        """Return a copy with a nested override dict applied"""
        if not overrides:
            return self
        data = self.model_dump()
        for section, values in overrides.items():
            if section not in data or not isinstance(values, dict):
                raise ConfigurationError(f"settings.{section}: unknown settings section")
            data[section].update(values)
        return parse_settings(data)


def format_validation_error(error: ValidationError, prefix: str = "") -> str:
    """Render a pydantic error as 'path: message' lines, path in JSON notation"""
    lines = []
    for item in error.errors():
        path = prefix
        for part in item["loc"]:
            if isinstance(part, int):
                path += f"[{part}]"
            else:
                path += f".{part}" if path else str(part)
        lines.append(f"{path or '<root>'}: {item['msg']}")
    return "; ".join(lines)


def parse_settings(data: Dict[str, Any]) -> Settings:
    try:
        return Settings.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(format_validation_error(e, "settings")) from e


def load_settings(path: Optional[str] = None) -> Settings:
    """Load settings from a JSON file, or the defaults when no path is given"""
    if not path:
        return Settings()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read settings file {path}: {e}") from e
    settings = parse_settings(data)
    logger.info(f"Loaded settings from {path}")
    return settings


DATA_DIR = Path(__file__).parent / "data"
