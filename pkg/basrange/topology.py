#!/usr/bin/env python3
"""
Building network topology
Devices with their automation level and role, and the links between them.
Shared by the simulator (links become virtual wires) and the attack-path planner.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .config import DATA_DIR, format_validation_error
from .errors import ConfigurationError

logger = logging.getLogger(__name__)


class DeviceClass(str, Enum):
    PLC = "PLC"
    WORKSTATION = "WORKSTATION"
    IOT_DEVICE = "IOT_DEVICE"
    GATEWAY = "GATEWAY"
    SENSOR_ACTUATOR = "SENSOR_ACTUATOR"


class Level(str, Enum):
    FIELD = "FIELD"
    AUTOMATION = "AUTOMATION"
    MANAGEMENT = "MANAGEMENT"


class Role(str, Enum):
    """Which actor, if any, runs on the device inside the simulator"""
    PASSIVE = "passive"
    CAMERA = "camera"
    NVR = "nvr"
    MQTT_BROKER = "mqtt_broker"
    MQTT_CLIENT = "mqtt_client"
    HUE_BRIDGE = "hue_bridge"
    HUE_APP = "hue_app"
    ATTACKER = "attacker"


class LinkMode(str, Enum):
    RELIABLE = "reliable"
    LOSSY = "lossy"


class DeviceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    id: str
    device_class: DeviceClass = Field(alias="class")
    level: Level
    role: Role = Role.PASSIVE
    internet_exposed: bool = False
    physical_access: bool = False
    persistence: bool = False
    vulns: List[str] = []
    params: Dict[str, Any] = {}

    @model_validator(mode="after")
    def _field_devices_stay_in_field(self):
        if self.device_class == DeviceClass.SENSOR_ACTUATOR and self.level != Level.FIELD:
            raise ValueError(f"{self.id}: SENSOR_ACTUATOR devices must be FIELD level")
        return self


class LinkSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    a: str
    b: str
    latency_ms: Optional[float] = None
    mode: LinkMode = LinkMode.RELIABLE
    loss: float = Field(0.0, ge=0.0, le=1.0)

    def other(self, device_id: str) -> str:
        return self.b if device_id == self.a else self.a


class Topology(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    devices: List[DeviceSpec]
    links: List[LinkSpec] = []

    @model_validator(mode="after")
    def _references_resolve(self):
        ids = [d.id for d in self.devices]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate device id")
        link_ids = [l.id for l in self.links]
        if len(link_ids) != len(set(link_ids)):
            raise ValueError("duplicate link id")
        known = set(ids)
        for link in self.links:
            for end in (link.a, link.b):
                if end not in known:
                    raise ValueError(f"link {link.id} references unknown device {end}")
        return self

    def device(self, device_id: str) -> DeviceSpec:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise ConfigurationError(f"unknown device id {device_id}")

    def link(self, link_id: str) -> LinkSpec:
        for l in self.links:
            if l.id == link_id:
                return l
        raise ConfigurationError(f"unknown link id {link_id}")

    def has_device(self, device_id: str) -> bool:
        return any(d.id == device_id for d in self.devices)

    def has_link(self, link_id: str) -> bool:
        return any(l.id == link_id for l in self.links)

    def link_between(self, a: str, b: str) -> Optional[LinkSpec]:
        for l in self.links:
            if {l.a, l.b} == {a, b}:
                return l
        return None

    def neighbors(self, device_id: str) -> List[str]:
        out = []
        for l in self.links:
            if l.a == device_id:
                out.append(l.b)
            elif l.b == device_id:
                out.append(l.a)
        return sorted(set(out))

    def by_role(self, role: Role) -> List[DeviceSpec]:
        return [d for d in self.devices if d.role == role]


def parse_topology(data: Dict[str, Any], source: str = "topology") -> Topology:
    try:
        return Topology.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"{source}: {format_validation_error(e)}") from e


def load_topology(ref: Union[str, Path], base_dir: Optional[Path] = None) -> Topology:
    """Load a topology by bundled name ('lab', 'reference') or by file path"""
    ref = str(ref)
    bundled = DATA_DIR / "topologies" / f"{ref}.json"
    candidates = [bundled]
    if base_dir is not None:
        candidates.insert(0, Path(base_dir) / ref)
    candidates.append(Path(ref))
    for path in candidates:
        if path.is_file():
            try:
                with open(path, 'r', encoding='utf-8') as f:
                    data = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigurationError(f"cannot read topology {path}: {e}") from e
            logger.debug(f"Loaded topology {ref} from {path}")
            return parse_topology(data, str(path))
    raise ConfigurationError(f"topology not found: {ref}")
