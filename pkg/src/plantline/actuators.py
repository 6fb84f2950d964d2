"""Actuator abstraction layer.

Uniform command/feedback interface per actuator: system-level IDs map to
device IO channels, commands publish to the device and mark the record
pending with the caller's correlation token, feedback drives the
pending -> moving -> stopped life cycle with analog tolerance thresholds
and report-by-exception filtering, and a periodic fault scan retries
silent commands once before escalating.

An escalated command never returns; the layer above times out. That is
deliberate: fault handling lives in the operation layer, this one only
reports.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from .bus import Envelope, QOS_AT_LEAST_ONCE
from .clock import Clock, Scheduler
from .events import EventLog

logger = logging.getLogger(__name__)

VALVE = "valve"
PUMP = "pump"

PHASE_IDLE = "idle"
PHASE_PENDING = "pending"
PHASE_MOVING = "moving"
PHASE_STOPPED = "stopped"


class UnknownActuator(KeyError):
    pass


class ActuatorFaultLocked(RuntimeError):
    def __init__(self, system_id: str, fault: dict) -> None:
        super().__init__(f"actuator {system_id} is fault-locked: {fault}")
        self.system_id = system_id


@dataclass(frozen=True)
class ActuatorBinding:
    system_id: str
    kind: str            # valve | pump
    device: str
    io: int
    tolerance: float     # engineering units (percent for valves)
    idle_value: float = 0.0


@dataclass
class ActuatorRecord:
    system_id: str
    target: float | None = None
    phase: str = PHASE_IDLE
    last_value: float | None = None    # last accepted feedback
    last_recv_ts: int | None = None
    call_token: str = ""
    initial_value: float | None = None  # feedback at dispatch, departure baseline
    dispatched_ts: int | None = None
    retried: bool = False
    fault: dict | None = None          # {"fault_type": ..., "detected_ts": ...}


@dataclass
class FaultScanConfig:
    period_ms: int = 1000
    retry_after_ms: int = 3000
    escalate_after_ms: int = 10000


class ActuatorLayer:
    def __init__(self, bus, scheduler: Scheduler, clock: Clock, log: EventLog,
                 *, scan: FaultScanConfig | None = None,
                 notify: Callable[[dict], None] | None = None) -> None:
        self.bus = bus
        self.scheduler = scheduler
        self.clock = clock
        self.log = log
        self.scan_cfg = scan or FaultScanConfig()
        self.notify = notify or (lambda diag: None)
        self.bindings: dict[str, ActuatorBinding] = {}
        self.records: dict[str, ActuatorRecord] = {}
        self._by_channel: dict[tuple[str, int], str] = {}
        self._completion_subscribers: list[Callable[[str, str], None]] = []
        self._scan_timer = None

    # -- wiring ---------------------------------------------------------------

    def add_binding(self, binding: ActuatorBinding) -> None:
        if binding.system_id in self.bindings:
            raise ValueError(f"duplicate system_id {binding.system_id}")
        channel = (binding.device, binding.io)
        if channel in self._by_channel:
            raise ValueError(f"channel {channel} already bound to {self._by_channel[channel]}")
        self.bindings[binding.system_id] = binding
        self._by_channel[channel] = binding.system_id
        self.records[binding.system_id] = ActuatorRecord(system_id=binding.system_id)

    def on_completion(self, callback: Callable[[str, str], None]) -> None:
        """callback(system_id, call_token), fired exactly once per token."""
        self._completion_subscribers.append(callback)

    def attach(self) -> None:
        """Subscribe to feedback and start the periodic fault scan."""
        self.bus.subscribe("dev/+/io/+/state", self.ingest_feedback)
        self._scan_timer = self.scheduler.every(self.scan_cfg.period_ms, self.fault_scan)

    # -- command path -----------------------------------------------------------

    def dispatch(self, system_id: str, value: float, call_token: str,
                 *, force: bool = False) -> None:
        """`force` skips the fault-lock gate for safe-state (lockout) commands;
        the fault marking itself stays until a manual clear."""
        binding = self.bindings.get(system_id)
        if binding is None:
            raise UnknownActuator(system_id)
        record = self.records[system_id]
        if record.fault is not None and not force:
            raise ActuatorFaultLocked(system_id, record.fault)
        if record.phase in (PHASE_PENDING, PHASE_MOVING) and record.call_token != call_token:
            logger.warning("%s: new command supersedes in-flight token %s",
                           system_id, record.call_token)
        now = self.clock.now_ms()
        record.target = float(value)
        record.phase = PHASE_PENDING
        record.call_token = call_token
        record.initial_value = record.last_value
        record.dispatched_ts = now
        record.retried = False
        self._publish_command(binding, value, call_token, now)
        self.log.record(now, "actuator", "dispatch", subject=system_id, token=call_token,
                        target=float(value), actuator_kind=binding.kind)

    def _publish_command(self, binding: ActuatorBinding, value: float,
                         token: str, now: int) -> None:
        # retained so a reconnecting device replays the latest command
        self.bus.publish(Envelope.json(
            f"dev/{binding.device}/io/{binding.io}/cmd",
            {"value": float(value), "ts": now, "token": token},
            qos=QOS_AT_LEAST_ONCE, retain=True, source_ts=now))

    # -- feedback path ------------------------------------------------------------

    def ingest_feedback(self, env: Envelope) -> None:
        parts = env.topic.split("/")
        try:
            device, io = parts[1], int(parts[3])
        except (IndexError, ValueError):
            logger.warning("unmapped feedback topic %s", env.topic)
            return
        system_id = self._by_channel.get((device, io))
        if system_id is None:
            return  # sensor channel or foreign device; not ours
        try:
            value = float(env.payload_json()["value"])
        except (ValueError, KeyError, TypeError):
            logger.warning("%s: malformed feedback payload", system_id)
            return
        binding = self.bindings[system_id]
        record = self.records[system_id]
        recv = env.recv_ts if env.recv_ts is not None else self.clock.now_ms()

        changed = record.last_value is None or abs(value - record.last_value) > binding.tolerance
        if changed:
            record.last_value = value
            record.last_recv_ts = recv

        # Life-cycle checks run even for report-by-exception suppressed values:
        # a command to the current position must still return to its caller.
        if record.phase == PHASE_PENDING and binding.kind == VALVE:
            if record.initial_value is None:
                record.initial_value = value
            elif abs(value - record.initial_value) > binding.tolerance:
                record.phase = PHASE_MOVING
                self.log.record(recv, "actuator", "moving", subject=system_id,
                                token=record.call_token, value=value)
        if (record.phase in (PHASE_PENDING, PHASE_MOVING) and record.target is not None
                and abs(value - record.target) <= binding.tolerance):
            self._complete(record, value, recv)

    def _complete(self, record: ActuatorRecord, value: float, recv: int) -> None:
        token = record.call_token
        record.phase = PHASE_STOPPED
        self.log.record(recv, "actuator", "stopped", subject=record.system_id,
                        token=token, value=value)
        # stopped settles straight back to idle; the cycle restarts on dispatch
        record.phase = PHASE_IDLE
        record.call_token = ""
        for callback in self._completion_subscribers:
            callback(record.system_id, token)

    # -- fault handling -------------------------------------------------------------

    def fault_scan(self) -> None:
        now = self.clock.now_ms()
        for system_id in sorted(self.records):
            record = self.records[system_id]
            if record.phase not in (PHASE_PENDING, PHASE_MOVING) or record.fault is not None:
                continue
            if record.dispatched_ts is None:
                continue
            age = now - record.dispatched_ts
            if age >= self.scan_cfg.escalate_after_ms:
                record.fault = {"fault_type": "stalled", "detected_ts": now}
                binding = self.bindings[system_id]
                diag = {"layer": "actuator", "event": "escalated", "actuator": system_id,
                        "kind": binding.kind, "token": record.call_token,
                        "target": record.target, "age_ms": age}
                self.log.record(now, "actuator", "escalated", subject=system_id,
                                token=record.call_token, age_ms=age)
                self.notify(diag)
            elif (age >= self.scan_cfg.retry_after_ms and not record.retried
                  and record.phase == PHASE_PENDING):
                # one retry covers single message loss; more would mask real faults
                record.retried = True
                binding = self.bindings[system_id]
                self._publish_command(binding, record.target, record.call_token, now)
                self.log.record(now, "actuator", "retry", subject=system_id,
                                token=record.call_token, target=record.target)

    def clear_fault(self, system_id: str) -> None:
        record = self.records[system_id]
        if record.fault is not None:
            record.fault = None
            record.phase = PHASE_IDLE
            record.call_token = ""
            self.log.record(self.clock.now_ms(), "actuator", "fault_cleared",
                            subject=system_id)

    # -- queries -----------------------------------------------------------------

    def record_of(self, system_id: str) -> ActuatorRecord:
        if system_id not in self.records:
            raise UnknownActuator(system_id)
        return self.records[system_id]

    def binding_of(self, system_id: str) -> ActuatorBinding:
        if system_id not in self.bindings:
            raise UnknownActuator(system_id)
        return self.bindings[system_id]
