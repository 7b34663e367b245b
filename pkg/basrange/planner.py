#!/usr/bin/env python3
"""
Attack-path planner
Device/vulnerability graph over a topology, enumeration of entry-to-PLC paths
labelled with attacker tactics, and exposure statistics for device inventories.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import networkx as nx
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .config import DATA_DIR, format_validation_error
from .errors import ConfigurationError, PlannerValidationError
from .topology import DeviceClass, DeviceSpec, Level, Role, Topology

logger = logging.getLogger(__name__)


class Category(str, Enum):
    XSS = "XSS"
    PATH_TRAVERSAL = "PATH_TRAVERSAL"
    FILE_DELETION = "FILE_DELETION"
    AUTH_BYPASS = "AUTH_BYPASS"
    HARDCODED_SECRET = "HARDCODED_SECRET"
    BUFFER_OVERFLOW = "BUFFER_OVERFLOW"
    MISCONFIGURATION = "MISCONFIGURATION"


class Capability(str, Enum):
    READ = "READ"
    CREDENTIAL_DISCLOSURE = "CREDENTIAL_DISCLOSURE"
    CODE_EXECUTION = "CODE_EXECUTION"
    PERSISTENCE = "PERSISTENCE"


class Tactic(str, Enum):
    INITIAL_ACCESS = "INITIAL_ACCESS"
    LATERAL_MOVEMENT_I = "LATERAL_MOVEMENT_I"
    LATERAL_MOVEMENT_II = "LATERAL_MOVEMENT_II"
    EXECUTION = "EXECUTION"
    PERSISTENCE = "PERSISTENCE"


class EntryClass(str, Enum):
    PUBLIC_PLC = "PUBLIC_PLC"
    PUBLIC_WORKSTATION = "PUBLIC_WORKSTATION"
    PUBLIC_IOT = "PUBLIC_IOT"
    PHYSICAL = "PHYSICAL"


TACTIC_ORDER = {t: i for i, t in enumerate(Tactic)}
# capabilities that let an attacker take over the device they are granted on
HOP_CAPABILITIES = (Capability.CODE_EXECUTION, Capability.CREDENTIAL_DISCLOSURE)
PUBLIC_ENTRIES = {
    EntryClass.PUBLIC_PLC: DeviceClass.PLC,
    EntryClass.PUBLIC_WORKSTATION: DeviceClass.WORKSTATION,
    EntryClass.PUBLIC_IOT: DeviceClass.IOT_DEVICE,
}


class VulnRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    product: str
    category: Category
    grants: Capability
    patched: bool = False
    description: Optional[str] = None

    @model_validator(mode="after")
    def _category_grants(self):
        required = {Category.BUFFER_OVERFLOW: Capability.CODE_EXECUTION,
                    Category.HARDCODED_SECRET: Capability.CREDENTIAL_DISCLOSURE}.get(self.category)
        if required is not None and self.grants != required:
            raise ValueError(f"{self.category.value} must grant {required.value}")
        return self


class Hop(BaseModel):
    device: str
    tactics: List[Tactic]
    vulns: List[str] = []


class AttackPath(BaseModel):
    entry_class: EntryClass
    devices: List[str]
    hops: List[Hop]


def parse_vulndb(data: Any, source: str = "vulndb") -> List[VulnRecord]:
    if not isinstance(data, list):
        raise ConfigurationError(f"{source}: expected a JSON list of vulnerability records")
    records = []
    for i, item in enumerate(data):
        try:
            records.append(VulnRecord.model_validate(item))
        except ValidationError as e:
            raise ConfigurationError(f"{source}: {format_validation_error(e, f'[{i}]')}") from e
    ids = [r.id for r in records]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise PlannerValidationError(f"{source}: duplicate vulnerability ids {', '.join(duplicates)}")
    return records


def load_vulndb(ref: Union[str, Path]) -> List[VulnRecord]:
    """Read a vulnerability database by path or bundled name ('vulndb', 'reference-vulndb')"""
    candidates = [Path(ref), DATA_DIR / str(ref), DATA_DIR / f"{ref}.json"]
    path = next((p for p in candidates if p.is_file()), None)
    if path is None:
        raise ConfigurationError(f"vulnerability database not found: {ref}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read vulnerability database {path}: {e}") from e
    return parse_vulndb(data, str(path))


def _exploitable(device: DeviceSpec, vulns: Dict[str, VulnRecord]) -> List[str]:
    return sorted(v for v in device.vulns if not vulns[v].patched and vulns[v].grants in HOP_CAPABILITIES)


def build_graph(topology: Topology, vulndb: Iterable[VulnRecord]) -> nx.DiGraph:
    """
    Directed graph over topology devices. Edge a->b exists when a and b share a
    link and b carries an unpatched vulnerability granting code execution or
    credentials. Attacker machines are not part of the graph.
    """
    vulns = {v.id: v for v in vulndb}
    graph = nx.DiGraph()
    for device in topology.devices:
        dangling = [v for v in device.vulns if v not in vulns]
        if dangling:
            raise PlannerValidationError(
                f"device {device.id} references unknown vulnerability {', '.join(dangling)}")
        if device.role == Role.ATTACKER:
            continue
        graph.add_node(device.id, spec=device, exploits=_exploitable(device, vulns))

    for link in topology.links:
        for a, b in ((link.a, link.b), (link.b, link.a)):
            if a not in graph or b not in graph:
                continue
            exploits = graph.nodes[b]['exploits']
            if exploits:
                graph.add_edge(a, b, vulns=exploits,
                               capabilities=sorted({vulns[v].grants.value for v in exploits}))
    logger.debug(f"Attack graph: {graph.number_of_nodes()} devices, {graph.number_of_edges()} edges")
    return graph


def entry_devices(graph: nx.DiGraph, entry_class: EntryClass) -> List[str]:
    """Devices an attacker of the given class can start from"""
    out = []
    for node, data in graph.nodes(data=True):
        spec: DeviceSpec = data['spec']
        if entry_class == EntryClass.PHYSICAL:
            if spec.physical_access:
                out.append(node)
        elif spec.device_class == PUBLIC_ENTRIES[entry_class] and spec.internet_exposed and data['exploits']:
            out.append(node)
    return sorted(out)


def label_path(graph: nx.DiGraph, devices: List[str]) -> List[Hop]:
    hops = []
    previous = Tactic.INITIAL_ACCESS
    for i, device in enumerate(devices):
        spec: DeviceSpec = graph.nodes[device]['spec']
        exploits = graph.nodes[device]['exploits']
        plc_target = i == len(devices) - 1 and spec.device_class == DeviceClass.PLC
        if i == 0:
            tactics = [Tactic.INITIAL_ACCESS]
        elif spec.level == Level.MANAGEMENT and not plc_target \
                and TACTIC_ORDER[previous] < TACTIC_ORDER[Tactic.LATERAL_MOVEMENT_II]:
            tactics = [Tactic.LATERAL_MOVEMENT_I]
        else:
            tactics = [Tactic.LATERAL_MOVEMENT_II]
        if plc_target:
            tactics.append(Tactic.EXECUTION)
            if spec.persistence:
                tactics.append(Tactic.PERSISTENCE)
        previous = tactics[-1]
        hops.append(Hop(device=device, tactics=tactics, vulns=exploits if i > 0 or spec.internet_exposed else []))
    return hops


def enumerate_paths(graph: nx.DiGraph, entry_class: Union[EntryClass, str, None], target_id: str,
                    max_len: int = 6) -> List[AttackPath]:
    """
    Simple paths from every device of the entry class to the target, at most
    max_len hops long, ordered by device sequence. No entry class means all four.
    """
    if target_id not in graph:
        raise PlannerValidationError(f"unknown target device {target_id}")
    classes = list(EntryClass) if entry_class is None else [EntryClass(entry_class)]
    found: Dict[Tuple[Tuple[str, ...], str], AttackPath] = {}
    for cls in classes:
        for entry in entry_devices(graph, cls):
            if entry == target_id:
                routes: List[List[str]] = [[target_id]]
            else:
                routes = list(nx.all_simple_paths(graph, entry, target_id, cutoff=max_len))
            for route in routes:
                key = (tuple(route), cls.value)
                found[key] = AttackPath(entry_class=cls, devices=route, hops=label_path(graph, route))
    paths = [found[k] for k in sorted(found)]
    logger.info(f"Found {len(paths)} attack paths to {target_id}")
    return paths


def paths_json(paths: List[AttackPath]) -> str:
    return json.dumps([p.model_dump(mode="json") for p in paths], indent=2, sort_keys=True) + "\n"


# -- exposure -------------------------------------------------------------------------

class InventoryRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    device_class: str
    total: int
    vulnerable: int
    reported_pct: Optional[float] = None
    overall: bool = False

    @model_validator(mode="after")
    def _counts(self):
        if self.total < 0 or self.vulnerable < 0:
            raise ValueError("counts must be non-negative")
        if self.vulnerable > self.total:
            raise ValueError(f"vulnerable ({self.vulnerable}) exceeds total ({self.total})")
        return self


class ClassExposure(BaseModel):
    device_class: str
    total: int
    vulnerable: int
    pct: float
    reported_pct: Optional[float] = None
    discrepancy: bool = False


class ExposureStats(BaseModel):
    rows: List[ClassExposure]
    aggregate: Optional[ClassExposure] = None


def exposure_pct(vulnerable: int, total: int) -> float:
    return round(100.0 * vulnerable / total, 1) if total else 0.0


def _exposure(row: InventoryRow, tolerance: float) -> ClassExposure:
    pct = exposure_pct(row.vulnerable, row.total)
    discrepancy = row.reported_pct is not None and abs(pct - row.reported_pct) > tolerance
    if discrepancy:
        logger.warning(f"{row.device_class}: {row.vulnerable}/{row.total} is {pct}%, "
                       f"reported {row.reported_pct}%")
    return ClassExposure(device_class=row.device_class, total=row.total, vulnerable=row.vulnerable,
                         pct=pct, reported_pct=row.reported_pct, discrepancy=discrepancy)


def exposure_stats(inventory: Iterable[Union[InventoryRow, Dict[str, Any], Tuple[str, int, int]]],
                   tolerance: float = 0.1) -> ExposureStats:
    """Per-class vulnerable ratios; the aggregate sums the rows not marked overall"""
    rows = []
    for i, item in enumerate(inventory):
        if isinstance(item, tuple):
            item = {'device_class': item[0], 'total': item[1], 'vulnerable': item[2]}
        try:
            rows.append(item if isinstance(item, InventoryRow) else InventoryRow.model_validate(item))
        except ValidationError as e:
            raise PlannerValidationError(format_validation_error(e, f"inventory[{i}]")) from e
    parts = [r for r in rows if not r.overall]
    aggregate = None
    if parts:
        total = sum(r.total for r in parts)
        vulnerable = sum(r.vulnerable for r in parts)
        aggregate = ClassExposure(device_class="all classes", total=total, vulnerable=vulnerable,
                                  pct=exposure_pct(vulnerable, total))
    return ExposureStats(rows=[_exposure(r, tolerance) for r in rows], aggregate=aggregate)


def load_inventory(ref: Union[str, Path]) -> List[InventoryRow]:
    candidates = [Path(ref), DATA_DIR / str(ref), DATA_DIR / f"{ref}.json"]
    path = next((p for p in candidates if p.is_file()), None)
    if path is None:
        raise ConfigurationError(f"inventory not found: {ref}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read inventory {path}: {e}") from e
    if not isinstance(data, list):
        raise ConfigurationError(f"{path}: expected a JSON list of inventory rows")
    rows = []
    for i, item in enumerate(data):
        try:
            rows.append(InventoryRow.model_validate(item))
        except ValidationError as e:
            raise ConfigurationError(f"{path}: {format_validation_error(e, f'[{i}]')}") from e
    return rows
