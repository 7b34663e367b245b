#!/usr/bin/env python3
"""
Shared pytest fixtures
"""

import pytest

from .attacks import run_scenario
from .config import Settings
from .devices import build_world
from .planner import load_vulndb
from .scenario import load_scenario_file
from .topology import load_topology


@pytest.fixture
def settings():
    return Settings()


@pytest.fixture(scope="session")
def lab():
    return load_topology("lab")


@pytest.fixture
def lab_world(lab):
    return build_world(lab, seed=1)


@pytest.fixture(scope="session")
def run_bundled():
    """Run a bundled scenario once per session and cache (world, trace, report)"""
    cache = {}

    def run(name):
        if name not in cache:
            scenario, base_dir = load_scenario_file(name)
            cache[name] = run_scenario(scenario, base_dir)
        return cache[name]
    return run


@pytest.fixture(scope="session")
def reference():
    return load_topology("reference")


@pytest.fixture(scope="session")
def ref_vulns():
    return load_vulndb("reference-vulndb")
