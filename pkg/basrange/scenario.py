#!/usr/bin/env python3
"""
Scenario and report files
Pydantic models for attack scenarios (topology, attacker vantage, timed steps)
and for the per-step attack report, plus their JSON loading and dumping.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .config import DATA_DIR, Settings, format_validation_error
from .detect import Alert
from .errors import ConfigurationError
from .topology import Topology, load_topology

logger = logging.getLogger(__name__)


class StepKind(str, Enum):
    RTSP_DROP_REQUEST = "RTSP_DROP_REQUEST"
    RTSP_TAMPER_SETUP_PORT = "RTSP_TAMPER_SETUP_PORT"
    RTSP_DROP_RESPONSE = "RTSP_DROP_RESPONSE"
    RTSP_TAMPER_STATUS = "RTSP_TAMPER_STATUS"
    RTSP_DROP_KEEPALIVE = "RTSP_DROP_KEEPALIVE"
    RTSP_REPLACE_KEEPALIVE = "RTSP_REPLACE_KEEPALIVE"
    RTP_DROP = "RTP_DROP"
    RTP_INJECT_FLOOD = "RTP_INJECT_FLOOD"
    FOOTAGE_REPLAY = "FOOTAGE_REPLAY"
    HUE_SNIFF_TOKEN = "HUE_SNIFF_TOKEN"
    HUE_VIRTUAL_LINKBUTTON_REGISTER = "HUE_VIRTUAL_LINKBUTTON_REGISTER"
    HUE_LIGHT_OFF_LOOP = "HUE_LIGHT_OFF_LOOP"
    HUE_ALERT_BLINK = "HUE_ALERT_BLINK"
    HUE_RECONFIG = "HUE_RECONFIG"
    MQTT_WILDCARD_RECON = "MQTT_WILDCARD_RECON"
    MQTT_CONNECT_FLOOD = "MQTT_CONNECT_FLOOD"
    MQTT_PAYLOAD_FLOOD = "MQTT_PAYLOAD_FLOOD"


class Outcome(str, Enum):
    ACHIEVED = "ACHIEVED"
    PARTIAL = "PARTIAL"
    FAILED = "FAILED"


class Vantage(BaseModel):
    """Where the attacker sits: passive/on-path taps on links, API reach to devices"""
    model_config = ConfigDict(extra="forbid")

    taps: List[str] = []
    reach: List[str] = []


class AttackStep(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: StepKind
    params: Dict[str, Any] = {}
    t_start: float = Field(0.0, ge=0)
    t_stop: Optional[float] = None

    @model_validator(mode="after")
    def _window_is_ordered(self):
        if self.t_stop is not None and self.t_stop < self.t_start:
            raise ValueError("t_stop must not be before t_start")
        return self


class Scenario(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    topology: Union[str, Topology] = "lab"
    seed: int = 0
    duration_s: float = Field(60.0, gt=0)
    attacker: str = "attacker"
    vantage: Vantage = Vantage()
    steps: List[AttackStep] = []
    settings: Dict[str, Any] = {}
    description: Optional[str] = None


class StepReport(BaseModel):
    index: int
    kind: StepKind
    t_start: float
    t_stop: Optional[float] = None
    outcome: Outcome
    reason: Optional[str] = None
    evidence: List[int] = []
    metrics: Dict[str, Any] = {}


class AttackReport(BaseModel):
    scenario: str
    seed: int
    duration_s: float
    steps: List[StepReport] = []
    availability: Optional[float] = None
    alerts: List[Alert] = []
    trace_events: int = 0


def load_scenario(text: Union[str, bytes], source: str = "scenario") -> Scenario:
    """Parse and validate scenario JSON; errors name the offending JSON path"""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{source}: invalid JSON: {e}") from e
    try:
        return Scenario.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"{source}: {format_validation_error(e)}") from e


def dump_scenario(scenario: Scenario) -> str:
    data = scenario.model_dump(mode="json", by_alias=True)
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def load_scenario_file(ref: Union[str, Path]) -> Tuple[Scenario, Path]:
    """Load a scenario by path or bundled name; returns it with its base directory"""
    candidates = [Path(ref), DATA_DIR / "scenarios" / str(ref), DATA_DIR / "scenarios" / f"{ref}.json"]
    path = next((p for p in candidates if p.is_file()), None)
    if path is None:
        raise ConfigurationError(f"cannot read scenario file {ref}: no such file")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"cannot read scenario file {ref}: {e}") from e
    logger.info(f"Loaded scenario from {path}")
    return load_scenario(text, str(path)), path.parent


def resolve_scenario(scenario: Scenario, base_dir: Optional[Path] = None,
                     settings: Optional[Settings] = None) -> Tuple[Topology, Settings]:
    """Topology and effective settings for a scenario, with reference checks"""
    topology = scenario.topology if isinstance(scenario.topology, Topology) \
        else load_topology(scenario.topology, base_dir)
    for i, link in enumerate(scenario.vantage.taps):
        if not topology.has_link(link):
            raise ConfigurationError(f"vantage.taps[{i}]: unknown link id {link}")
    for i, device in enumerate(scenario.vantage.reach):
        if not topology.has_device(device):
            raise ConfigurationError(f"vantage.reach[{i}]: unknown device id {device}")
    for i, step in enumerate(scenario.steps):
        if step.t_start > scenario.duration_s:
            raise ConfigurationError(f"steps[{i}].t_start: after scenario end ({scenario.duration_s}s)")
    effective = (settings or Settings()).merged(scenario.settings)
    return topology, effective


def write_report(report: AttackReport, path: Path) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(report_json(report))


def report_json(report: AttackReport) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
