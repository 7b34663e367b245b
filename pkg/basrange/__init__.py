#!/usr/bin/env python3
"""
basrange - smart-building network range
Deterministic simulator of camera/NVR video, an MQTT bus and a lighting bridge,
with an on-path attack engine, detectors and an attack-path planner.
"""

__version__ = "0.1.0"
