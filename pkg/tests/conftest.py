"""Shared builders for tests: tiny plants wired up the same way the harness does."""

from __future__ import annotations

from random import Random

import pytest

from plantline.actuators import ActuatorBinding, ActuatorLayer, FaultScanConfig
from plantline.bus import LoopbackBus
from plantline.clock import Scheduler, SimClock
from plantline.config import validate
from plantline.events import EventLog
from plantline.harness import Supervisor


class Rig:
    """Bare wiring (clock, scheduler, bus, log) for layer-level tests."""

    def __init__(self, *, origin_ms: int = 0, seed: int = 7) -> None:
        self.clock = SimClock(origin_ms)
        self.scheduler = Scheduler(self.clock)
        self.bus = LoopbackBus(self.scheduler, self.clock, rng=Random(seed))
        self.log = EventLog()

    def run_for(self, seconds: float) -> None:
        self.scheduler.run_until(self.clock.now_ms() + int(seconds * 1000))

    def actuator_layer(self, bindings: list[ActuatorBinding],
                       scan: FaultScanConfig | None = None) -> ActuatorLayer:
        layer = ActuatorLayer(self.bus, self.scheduler, self.clock, self.log, scan=scan)
        for b in bindings:
            layer.add_binding(b)
        layer.attach()
        return layer


@pytest.fixture
def rig() -> Rig:
    return Rig()


def small_plant_doc(*, n_valves: int = 4, with_pump: bool = True,
                    link_delay=None, seed: int = 11,
                    operations: list | None = None,
                    routines: list | None = None,
                    sensors_extra: list | None = None,
                    escalate_after_ms: int = 10000) -> dict:
    """One actuator panel, one sensor panel, one resource per test line."""
    channels = [{"io": i, "type": "valve"} for i in range(1, n_valves + 1)]
    if with_pump:
        channels.append({"io": 17, "type": "pump", "flow_io": 18, "nominal_flow": 50})
    doc = {
        "broker": {"url": "loopback:"},
        "clock": {"mode": "simulated", "origin_ms": 0, "seed": seed},
        "sim": {
            "cmd_latency_ms": {"low": 0, "high": 1000},
            "motion_dead_time_ms": 800,
        },
        "devices": [
            {"id": "ctrl-1", "channels": channels},
            {"id": "station-2", "channels": [
                {"io": 1, "type": "sensor", "trace": 0},
                {"io": 2, "type": "sensor", "trace": 5},
            ]},
        ],
        "actuators": [
            {"id": f"V{i:02d}", "kind": "valve", "device": "ctrl-1", "io": i}
            for i in range(1, n_valves + 1)
        ],
        "sensors": [
            {"id": "tank_level", "device": "station-2", "io": 1},
            {"id": "flow", "device": "station-2", "io": 2},
        ] + (sensors_extra or []),
        "resources": [],
        "operations": operations or [],
        "routines": routines or [],
        "actuator_defaults": {"escalate_after_ms": escalate_after_ms},
    }
    acts = [a["id"] for a in doc["actuators"]]
    if with_pump:
        doc["actuators"].append({"id": "P1", "kind": "pump", "device": "ctrl-1", "io": 17})
        doc["sensors"].append({"id": "p1_flow", "device": "ctrl-1", "io": 18})
        acts.append("P1")
    half = max(1, len(acts) // 2)
    doc["resources"] = [
        {"id": "red", "actuators": acts[:half]},
        {"id": "blue", "actuators": acts[half:] or acts[:1]},
    ]
    if link_delay is not None:
        doc["sim"]["link_delay_ms"] = link_delay
    return doc


def boot_supervisor(doc: dict) -> Supervisor:
    return Supervisor(validate(doc)).boot()
