"""Simulated device gateways honoring the field wire contract.

Each device is an independent timed actor: every datapoint is sampled at
1 Hz and published, commands arrive over the cmd subscription and are
executed asynchronously, telemetry goes out once per minute, and a lost
link publishes the last-will status while physics keep running.

Valve motion is linear with a configurable full-sweep time; commands take
effect after a per-device processing latency plus a fixed actuator
response dead time, which together with the 1 Hz feedback quantization
reproduce field-observed issuance-to-motion latencies in the low seconds.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from random import Random
from typing import Any, Callable

from .bus import Envelope, LoopbackBus, QOS_AT_LEAST_ONCE, QOS_AT_MOST_ONCE
from .clock import Clock, Scheduler
from .events import EventLog

logger = logging.getLogger(__name__)

Trace = Callable[[int], float]  # sim-time ms -> value


def constant_trace(value: float) -> Trace:
    return lambda t_ms: value


def ramp_trace(start: float, rate_per_s: float, *, t0_ms: int = 0,
               lo: float | None = None, hi: float | None = None) -> Trace:
    def trace(t_ms: int) -> float:
        v = start + rate_per_s * (t_ms - t0_ms) / 1000.0
        if lo is not None:
            v = max(lo, v)
        if hi is not None:
            v = min(hi, v)
        return v
    return trace


def steps_trace(points: list[tuple[float, float]], *, t0_ms: int = 0) -> Trace:
    """Piecewise-constant: points are (at_s, value), sorted by time."""
    pts = sorted(points)

    def trace(t_ms: int) -> float:
        rel_s = (t_ms - t0_ms) / 1000.0
        value = pts[0][1]
        for at_s, v in pts:
            if rel_s >= at_s:
                value = v
            else:
                break
        return value
    return trace


def sawtooth_trace(low: float, high: float, period_s: float, *, t0_ms: int = 0) -> Trace:
    def trace(t_ms: int) -> float:
        phase = ((t_ms - t0_ms) / 1000.0 % period_s) / period_s
        return low + (high - low) * phase
    return trace


def trace_from_config(cfg: Any, *, t0_ms: int = 0) -> Trace:
    if cfg is None:
        return constant_trace(0.0)
    if isinstance(cfg, (int, float)):
        return constant_trace(float(cfg))
    kind = cfg.get("kind", "constant")
    if kind == "constant":
        return constant_trace(float(cfg.get("value", 0.0)))
    if kind == "ramp":
        return ramp_trace(float(cfg.get("start", 0.0)), float(cfg.get("rate_per_s", 0.0)),
                          t0_ms=t0_ms, lo=cfg.get("lo"), hi=cfg.get("hi"))
    if kind == "steps":
        return steps_trace([(float(p["at_s"]), float(p["value"])) for p in cfg["points"]],
                           t0_ms=t0_ms)
    if kind == "sawtooth":
        return sawtooth_trace(float(cfg["low"]), float(cfg["high"]),
                              float(cfg["period_s"]), t0_ms=t0_ms)
    raise ValueError(f"unknown trace kind: {kind!r}")


@dataclass
class SimValve:
    io: int
    position: float = 0.0          # percent
    target: float = 0.0
    sweep_time_s: float = 4.0      # full 0->100 travel
    moving: bool = False
    stuck: bool = False
    effective_from_ms: int = 0     # motion may not start before this
    last_update_ms: int = 0
    last_token: str = ""

    def advance(self, now_ms: int) -> None:
        start = max(self.last_update_ms, self.effective_from_ms)
        self.last_update_ms = max(self.last_update_ms, now_ms)
        if self.stuck or now_ms <= start or self.position == self.target:
            self.moving = self.position != self.target and not self.stuck
            return
        rate = 100.0 / self.sweep_time_s  # percent per second
        travel = rate * (now_ms - start) / 1000.0
        delta = self.target - self.position
        if abs(delta) <= travel:
            self.position = self.target
        else:
            self.position += math.copysign(travel, delta)
        self.moving = self.position != self.target

    def command(self, value: float, now_ms: int, effective_from_ms: int, token: str) -> None:
        if token and token == self.last_token and value == self.target:
            return  # duplicate delivery of the same command
        self.advance(now_ms)  # settle motion under the old target first
        self.target = min(100.0, max(0.0, float(value)))
        self.effective_from_ms = effective_from_ms
        self.last_token = token


@dataclass
class SimPump:
    io: int
    running: bool = False
    paused_by_disconnect: bool = False
    nominal_flow: float = 100.0
    nominal_head: float = 2.0
    flow_io: int | None = None
    head_io: int | None = None
    flow_override: Trace | None = None
    effective_from_ms: int = 0
    pending_running: bool | None = None
    last_token: str = ""

    def advance(self, now_ms: int) -> None:
        if self.pending_running is not None and now_ms >= self.effective_from_ms:
            self.running = self.pending_running
            self.pending_running = None

    @property
    def effective_on(self) -> bool:
        return self.running and not self.paused_by_disconnect

    def flow_rate(self, now_ms: int) -> float:
        if self.flow_override is not None:
            return self.flow_override(now_ms)
        return self.nominal_flow if self.effective_on else 0.0

    def head_pressure(self, now_ms: int) -> float:
        return self.nominal_head if self.effective_on else 0.0

    def command(self, value: float, now_ms: int, effective_from_ms: int, token: str) -> None:
        want = value != 0
        if token and token == self.last_token and (self.pending_running == want
                                                   or self.running == want):
            return
        self.advance(now_ms)
        self.pending_running = want
        self.effective_from_ms = effective_from_ms
        self.last_token = token


@dataclass
class SimSensor:
    io: int
    trace: Trace = field(default_factory=lambda: constant_trace(0.0))

    def value(self, now_ms: int) -> float:
        return self.trace(now_ms)


@dataclass
class DeviceTimings:
    tick_ms: int = 1000
    telemetry_every: int = 60
    cmd_latency_low_ms: int = 0
    cmd_latency_high_ms: int = 1000
    motion_dead_time_ms: int = 800


class SimDevice:
    """One gateway: a set of IO channels behind a single network session."""

    def __init__(self, device_id: str, bus: LoopbackBus, scheduler: Scheduler,
                 clock: Clock, rng: Random, timings: DeviceTimings,
                 log: EventLog | None = None) -> None:
        self.id = device_id
        self.bus = bus
        self.scheduler = scheduler
        self.clock = clock
        self.rng = rng
        self.timings = timings
        self.log = log
        self.online = True
        self.valves: dict[int, SimValve] = {}
        self.pumps: dict[int, SimPump] = {}
        self.sensors: dict[int, SimSensor] = {}
        self._boot_ms = clock.now_ms()
        self._tick_count = 0
        self._started = False

    # -- construction --------------------------------------------------------

    def add_valve(self, io: int, **kwargs: Any) -> SimValve:
        valve = SimValve(io=io, **kwargs)
        valve.last_update_ms = self.clock.now_ms()
        self.valves[io] = valve
        return valve

    def add_pump(self, io: int, **kwargs: Any) -> SimPump:
        pump = SimPump(io=io, **kwargs)
        self.pumps[io] = pump
        return pump

    def add_sensor(self, io: int, trace: Trace | None = None) -> SimSensor:
        sensor = SimSensor(io=io, trace=trace or constant_trace(0.0))
        self.sensors[io] = sensor
        return sensor

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self._started = True
        self.bus.open_session(self.id)
        self.bus.register_last_will(self.id, Envelope(
            topic=f"dev/{self.id}/status", payload=b"offline",
            qos=QOS_AT_LEAST_ONCE, retain=True))
        self.bus.subscribe(f"dev/{self.id}/io/+/cmd", self._on_command, session=self.id)
        self._publish_status("online")
        # desynchronized tick phase, like independently booted hardware
        phase = self.rng.randrange(self.timings.tick_ms)
        self.scheduler.call_later(phase, self._tick)

    def _publish_status(self, text: str) -> None:
        self.bus.publish(Envelope(topic=f"dev/{self.id}/status", payload=text.encode(),
                                  qos=QOS_AT_LEAST_ONCE, retain=True,
                                  source_ts=self.clock.now_ms()))

    def set_link_state(self, online: bool) -> None:
        if online == self.online:
            return
        now = self.clock.now_ms()
        if not online:
            self.online = False
            for pump in self.pumps.values():
                pump.advance(now)
                pump.paused_by_disconnect = True
            # wifi drop: ungraceful, broker publishes the last will
            self.bus.close_session(self.id, graceful=False)
            self._log("link_offline")
        else:
            self.bus.open_session(self.id)  # replays retained cmds to our subscription
            self.online = True
            for pump in self.pumps.values():
                pump.paused_by_disconnect = False
            self._publish_status("online")
            self._log("link_online")

    def _log(self, kind: str, **attrs: Any) -> None:
        if self.log is not None:
            self.log.record(self.clock.now_ms(), "sim", kind, subject=self.id, **attrs)

    # -- command path ---------------------------------------------------------

    def _on_command(self, env: Envelope) -> None:
        parts = env.topic.split("/")
        try:
            io = int(parts[3])
        except (IndexError, ValueError):
            logger.warning("%s: unparseable command topic %s", self.id, env.topic)
            return
        try:
            doc = env.payload_json()
            value = float(doc["value"])
            token = str(doc.get("token", ""))
        except (ValueError, KeyError, TypeError):
            logger.warning("%s: malformed command payload on %s", self.id, env.topic)
            return
        if io not in self.valves and io not in self.pumps:
            logger.warning("%s: command for unknown channel io=%d ignored", self.id, io)
            return
        latency = self.rng.uniform(self.timings.cmd_latency_low_ms,
                                   self.timings.cmd_latency_high_ms)
        self.scheduler.call_later(latency, self._apply_command, io, value, token)

    def _apply_command(self, io: int, value: float, token: str) -> None:
        now = self.clock.now_ms()
        if io in self.valves:
            self.valves[io].command(value, now, now + self.timings.motion_dead_time_ms, token)
        elif io in self.pumps:
            self.pumps[io].command(value, now, now, token)

    # -- sampling loop ----------------------------------------------------------

    def _tick(self) -> None:
        if not self._started:
            return
        now = self.clock.now_ms()
        self._tick_count += 1
        for valve in self.valves.values():
            valve.advance(now)
        for pump in self.pumps.values():
            pump.advance(now)
        if self.online:
            for io in sorted(self.valves):
                self._publish_state(io, round(self.valves[io].position, 2), now)
            for io in sorted(self.pumps):
                pump = self.pumps[io]
                self._publish_state(io, 1.0 if pump.effective_on else 0.0, now)
                if pump.flow_io is not None:
                    self._publish_state(pump.flow_io, round(pump.flow_rate(now), 2), now)
                if pump.head_io is not None:
                    self._publish_state(pump.head_io, round(pump.head_pressure(now), 2), now)
            for io in sorted(self.sensors):
                self._publish_state(io, round(self.sensors[io].value(now), 3), now)
            if self._tick_count % self.timings.telemetry_every == 0:
                self._publish_telemetry(now)
        self.scheduler.call_later(self.timings.tick_ms, self._tick)

    def _publish_state(self, io: int, value: float, now: int) -> None:
        self.bus.publish(Envelope.json(
            f"dev/{self.id}/io/{io}/state", {"value": value, "ts": now},
            qos=QOS_AT_MOST_ONCE, source_ts=now))

    def _publish_telemetry(self, now: int) -> None:
        uptime_s = (now - self._boot_ms) // 1000
        # crc32, not hash(): string hashing is randomized across processes
        rssi = -55 + round(10 * math.sin(now / 60000.0 + (zlib.crc32(self.id.encode()) % 7)))
        self.bus.publish(Envelope.json(
            f"dev/{self.id}/telemetry", {"uptime_s": uptime_s, "rssi": rssi, "ts": now},
            qos=QOS_AT_MOST_ONCE, source_ts=now))

    # -- fault injection -----------------------------------------------------

    def inject_stuck_valve(self, io: int, stuck: bool = True) -> None:
        valve = self.valves[io]
        valve.advance(self.clock.now_ms())
        valve.stuck = stuck
        self._log("stuck_injected" if stuck else "stuck_cleared", io=io)

    def set_sensor_trace(self, io: int, trace: Trace) -> None:
        if io in self.sensors:
            self.sensors[io].trace = trace
        elif io in (p.flow_io for p in self.pumps.values()):
            for pump in self.pumps.values():
                if pump.flow_io == io:
                    pump.flow_override = trace
        else:
            raise KeyError(f"{self.id}: no sensor channel io={io}")


class PlantSim:
    """The device fleet; all cross-device interaction goes through the bus."""

    def __init__(self, bus: LoopbackBus, scheduler: Scheduler, clock: Clock,
                 seed: int, timings: DeviceTimings, log: EventLog | None = None) -> None:
        self.bus = bus
        self.scheduler = scheduler
        self.clock = clock
        self.seed = seed
        self.timings = timings
        self.log = log
        self.devices: dict[str, SimDevice] = {}

    def add_device(self, device_id: str, timings: DeviceTimings | None = None) -> SimDevice:
        # independent per-device stream so adding a device does not reshuffle others
        dev_rng = Random(f"{self.seed}:{device_id}")
        dev = SimDevice(device_id, self.bus, self.scheduler, self.clock,
                        dev_rng, timings or self.timings, self.log)
        self.devices[device_id] = dev
        return dev

    def start(self) -> None:
        for dev_id in sorted(self.devices):
            self.devices[dev_id].start()

    def device(self, device_id: str) -> SimDevice:
        return self.devices[device_id]

    def set_link_state(self, device_id: str, online: bool) -> None:
        self.devices[device_id].set_link_state(online)
