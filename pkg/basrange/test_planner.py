#!/usr/bin/env python3
"""
Tests for attack-path enumeration and the exposure statistics
"""

import random

import pytest

from .errors import ConfigurationError, PlannerValidationError
from .planner import (Capability, EntryClass, Tactic, VulnRecord, build_graph, enumerate_paths, exposure_stats,
                      load_inventory, load_vulndb, parse_vulndb)
from .topology import DeviceClass, Level, parse_topology

IA, LM1, LM2 = Tactic.INITIAL_ACCESS, Tactic.LATERAL_MOVEMENT_I, Tactic.LATERAL_MOVEMENT_II
EXEC, PERSIST = Tactic.EXECUTION, Tactic.PERSISTENCE

RANDOM_VULNS = [
    {'id': "RCE", 'product': "x", 'category': "BUFFER_OVERFLOW", 'grants': "CODE_EXECUTION"},
    {'id': "CRED", 'product': "x", 'category': "HARDCODED_SECRET", 'grants': "CREDENTIAL_DISCLOSURE"},
    {'id': "READ", 'product': "x", 'category': "XSS", 'grants': "READ"},
    {'id': "OLD", 'product': "x", 'category': "AUTH_BYPASS", 'grants': "CODE_EXECUTION", 'patched': True},
]
HOP_GRANTS = (Capability.CODE_EXECUTION, Capability.CREDENTIAL_DISCLOSURE)
PUBLIC = {EntryClass.PUBLIC_PLC: DeviceClass.PLC, EntryClass.PUBLIC_WORKSTATION: DeviceClass.WORKSTATION,
          EntryClass.PUBLIC_IOT: DeviceClass.IOT_DEVICE}


def plan(topology, vulndb, entry=None, target="plc-1", max_len=6):
    return enumerate_paths(build_graph(topology, vulndb), entry, target, max_len)


def routes(paths):
    return {(tuple(p.devices), p.entry_class) for p in paths}


def random_topology(rng):
    """Up to 10 devices, device 0 is the target PLC"""
    classes = [DeviceClass.PLC, DeviceClass.WORKSTATION, DeviceClass.IOT_DEVICE, DeviceClass.GATEWAY]
    devices = []
    for i in range(rng.randint(2, 10)):
        cls = DeviceClass.PLC if i == 0 else rng.choice(classes)
        devices.append({
            'id': f"d{i}", 'class': cls.value,
            'level': (Level.MANAGEMENT if cls == DeviceClass.WORKSTATION else Level.AUTOMATION).value,
            'internet_exposed': rng.random() < 0.4,
            'physical_access': rng.random() < 0.2,
            'vulns': sorted(rng.sample([v['id'] for v in RANDOM_VULNS], rng.randint(0, 2))),
        })
    links = []
    for a in range(len(devices)):
        for b in range(a + 1, len(devices)):
            if rng.random() < 0.3:
                links.append({'id': f"l{a}-{b}", 'a': f"d{a}", 'b': f"d{b}"})
    return parse_topology({'name': "random", 'devices': devices, 'links': links})


def oracle(topology, vulndb, target, max_len):
    """Depth-first walk over the topology links, independent of the graph library"""
    vulns = {v.id: v for v in vulndb}

    def takeable(spec):
        return any(not vulns[v].patched and vulns[v].grants in HOP_GRANTS for v in spec.vulns)

    found = set()

    def walk(path, cls):
        if path[-1] == target:
            found.add((tuple(path), cls))
            return
        if len(path) - 1 == max_len:
            return
        for n in topology.neighbors(path[-1]):
            if n not in path and takeable(topology.device(n)):
                walk(path + [n], cls)

    for cls in EntryClass:
        for spec in topology.devices:
            if cls == EntryClass.PHYSICAL:
                entry = spec.physical_access
            else:
                entry = spec.device_class == PUBLIC[cls] and spec.internet_exposed and takeable(spec)
            if entry:
                walk([spec.id], cls)
    return found


def test_reference_topology_has_one_path_per_entry_class(reference, ref_vulns):
    paths = plan(reference, ref_vulns)
    assert [(p.entry_class, p.devices) for p in paths] == [
        (EntryClass.PUBLIC_IOT, ["cam-pub", "ws-mgmt", "plc-1"]),
        (EntryClass.PHYSICAL, ["gw-phys", "ws-mgmt", "plc-1"]),
        (EntryClass.PUBLIC_PLC, ["plc-1"]),
        (EntryClass.PUBLIC_WORKSTATION, ["ws-pub", "plc-1"]),
    ]
    labels = {p.entry_class: [h.tactics for h in p.hops] for p in paths}
    assert labels[EntryClass.PUBLIC_PLC] == [[IA, EXEC, PERSIST]]
    assert labels[EntryClass.PUBLIC_WORKSTATION] == [[IA], [LM2, EXEC, PERSIST]]
    assert labels[EntryClass.PUBLIC_IOT] == [[IA], [LM1], [LM2, EXEC, PERSIST]]
    assert labels[EntryClass.PHYSICAL] == [[IA], [LM1], [LM2, EXEC, PERSIST]]


def test_lab_camera_path(lab):
    paths = plan(lab, load_vulndb("vulndb"), EntryClass.PUBLIC_IOT, target="ac-plc")
    assert len(paths) == 1
    hops = paths[0].hops
    assert [h.device for h in hops] == ["camera", "workstation", "ac-plc"]
    assert [h.vulns for h in hops] == [["CAM-1"], ["WS-1"], ["BAS-7", "BAS-8"]]
    assert [h.tactics for h in hops] == [[IA], [LM1], [LM2, EXEC, PERSIST]]


def test_hvac_plc_is_unreachable_through_read_only_gateway(lab):
    assert plan(lab, load_vulndb("vulndb"), target="hvac-plc") == []


def test_all_patched_means_no_edges(reference, ref_vulns):
    patched = [v.model_copy(update={'patched': True}) for v in ref_vulns]
    graph = build_graph(reference, patched)
    assert graph.number_of_edges() == 0
    assert enumerate_paths(graph, None, "plc-1") == []


def test_max_len_cuts_longer_paths(reference, ref_vulns):
    paths = plan(reference, ref_vulns, max_len=1)
    assert [p.devices for p in paths] == [["plc-1"], ["ws-pub", "plc-1"]]


def test_matches_brute_force_on_random_graphs():
    vulndb = parse_vulndb(RANDOM_VULNS)
    rng = random.Random(7)
    for _ in range(200):
        topology = random_topology(rng)
        max_len = rng.randint(1, 6)
        assert routes(plan(topology, vulndb, target="d0", max_len=max_len)) == oracle(topology, vulndb, "d0", max_len)


@pytest.mark.parametrize("seed", range(100))
def test_patching_never_adds_a_path(seed):
    rng = random.Random(seed)
    topology = random_topology(rng)
    vulndb = parse_vulndb(RANDOM_VULNS)
    before = routes(plan(topology, vulndb, target="d0"))
    victim = rng.choice(["RCE", "CRED"])
    patched = [v.model_copy(update={'patched': True}) if v.id == victim else v for v in vulndb]
    assert routes(plan(topology, patched, target="d0")) <= before


def test_dangling_vulnerability_reference(ref_vulns):
    topology = parse_topology({'name': "t", 'devices': [
        {'id': "plc-1", 'class': "PLC", 'level': "AUTOMATION", 'vulns': ["NOPE"]}]})
    with pytest.raises(PlannerValidationError, match="NOPE"):
        build_graph(topology, ref_vulns)


def test_unknown_target(reference, ref_vulns):
    with pytest.raises(PlannerValidationError, match="unknown target device ghost"):
        plan(reference, ref_vulns, target="ghost")


def test_vulndb_validation():
    bad = [{'id': "X", 'product': "p", 'category': "BUFFER_OVERFLOW", 'grants': "READ"}]
    with pytest.raises(ConfigurationError, match=r"\[0\]"):
        parse_vulndb(bad)
    with pytest.raises(PlannerValidationError, match="duplicate"):
        parse_vulndb(RANDOM_VULNS + RANDOM_VULNS[:1])
    assert isinstance(parse_vulndb(RANDOM_VULNS)[0], VulnRecord)


def test_bundled_inventory_exposure():
    """The overall row recomputes to 39.7% against the reported 39.3%"""
    stats = exposure_stats(load_inventory("inventory"))
    overall, cameras = stats.rows
    assert overall.pct == 39.7 and overall.discrepancy
    assert cameras.pct == 91.5 and not cameras.discrepancy
    assert stats.aggregate.total == 11269


def test_exposure_edge_cases():
    stats = exposure_stats([("empty", 0, 0), ("half", 4, 2)])
    assert [r.pct for r in stats.rows] == [0.0, 50.0]
    assert stats.aggregate.pct == 50.0
    with pytest.raises(PlannerValidationError, match=r"inventory\[0\]"):
        exposure_stats([("broken", 1, 2)])
