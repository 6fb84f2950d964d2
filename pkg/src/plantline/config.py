"""Plant configuration: loading, structural validation, semantic validation.

Validation is exhaustive rather than fail-fast: a document either resolves
to a fully typed PlantConfig or comes back with the complete list of
violations. The structural half is a published JSON schema
(data/plant_config.schema.json); the semantic half enforces referential
integrity, unique priorities, operation/resource boundaries (C2), static
idle restoration (C3) and exclusive operation ownership across routines.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .actuators import ActuatorBinding, FaultScanConfig
from .bus import DelayModel
from .conditions import ExpressionError, parse_expr
from .interlock import WatchdogConfig
from .operations import (
    DEFAULT_GROUP_TIMEOUT_MS,
    DEFAULT_POLL_MS,
    ConditionStep,
    DelayStep,
    GroupStep,
    OperationDef,
    Step,
)
from .routines import RoutineDef, Transition, EXTERNAL_PREFIX
from .sim import DeviceTimings

DEFAULT_VALVE_TOLERANCE = 2.0   # percent of span
DEFAULT_PUMP_TOLERANCE = 0.5    # relay feedback is 0/1


class ConfigError(ValueError):
    def __init__(self, violations: list[str]) -> None:
        super().__init__("invalid plant configuration:\n  " + "\n  ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class SensorBinding:
    sensor_id: str
    device: str
    io: int


@dataclass(frozen=True)
class ChannelSpec:
    io: int
    type: str
    sweep_time_s: float = 4.0
    flow_io: int | None = None
    head_io: int | None = None
    nominal_flow: float = 100.0
    trace: Any = None


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    channels: tuple[ChannelSpec, ...]


@dataclass(frozen=True)
class ResourceSpec:
    resource_id: str
    actuators: tuple[str, ...]
    lockout: tuple[tuple[str, float], ...]


@dataclass
class PlantConfig:
    broker_url: str
    clock_mode: str
    origin_ms: int | None
    seed: int
    log_path: str | None
    timings: DeviceTimings
    link_delay: DelayModel
    link_delay_overrides: dict[str, DelayModel]
    duplicate_probability: float
    devices: list[DeviceSpec]
    bindings: list[ActuatorBinding]
    sensors: list[SensorBinding]
    resources: dict[str, ResourceSpec]
    operations: dict[str, OperationDef]
    routines: dict[str, RoutineDef]
    scan: FaultScanConfig
    watchdog: WatchdogConfig
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def priorities(self) -> dict[str, int]:
        return {op_id: d.priority for op_id, d in self.operations.items()}


def load_schema() -> dict:
    text = (importlib.resources.files("plantline") / "data" /
            "plant_config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_document(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return doc


def validate(doc: dict) -> PlantConfig:
    """Resolve a parsed document into a PlantConfig or raise ConfigError
    carrying every violation found."""
    violations: list[str] = []
    schema = load_schema()
    validator = jsonschema.Draft202012Validator(schema)
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        violations.append(f"{where}: {err.message}")
    if violations:
        raise ConfigError(violations)

    # -- flat sections with defaults ---------------------------------------
    broker_url = doc["broker"]["url"]
    clock_cfg = doc.get("clock", {})
    sim_cfg = doc.get("sim", {})
    lat = sim_cfg.get("cmd_latency_ms", {})
    timings = DeviceTimings(
        tick_ms=sim_cfg.get("tick_ms", 1000),
        telemetry_every=sim_cfg.get("telemetry_every", 60),
        cmd_latency_low_ms=lat.get("low", 0),
        cmd_latency_high_ms=lat.get("high", 1000),
        motion_dead_time_ms=sim_cfg.get("motion_dead_time_ms", 800),
    )
    link_delay = DelayModel.from_config(sim_cfg.get("link_delay_ms"))
    overrides = {dev: DelayModel.from_config(cfg)
                 for dev, cfg in sim_cfg.get("link_delay_overrides", {}).items()}
    scan_cfg = doc.get("actuator_defaults", {})
    scan = FaultScanConfig(
        period_ms=scan_cfg.get("fault_scan_period_ms", 1000),
        retry_after_ms=scan_cfg.get("retry_after_ms", 3000),
        escalate_after_ms=scan_cfg.get("escalate_after_ms", 10000),
    )
    wd_cfg = doc.get("interlock", {})
    watchdog = WatchdogConfig(
        period_ms=wd_cfg.get("watchdog_period_ms", 10_000),
        queue_warn_ms=wd_cfg.get("queue_warn_ms", 600_000),
        hold_warn_ms=wd_cfg.get("hold_warn_ms", 600_000),
    )

    # -- devices -----------------------------------------------------------
    devices: list[DeviceSpec] = []
    channel_index: dict[tuple[str, int], str] = {}
    for d_i, dev in enumerate(doc.get("devices", [])):
        channels = []
        for c_i, ch in enumerate(dev["channels"]):
            spec = ChannelSpec(io=ch["io"], type=ch["type"],
                               sweep_time_s=ch.get("sweep_time_s", 4.0),
                               flow_io=ch.get("flow_io"), head_io=ch.get("head_io"),
                               nominal_flow=ch.get("nominal_flow", 100.0),
                               trace=ch.get("trace"))
            key = (dev["id"], spec.io)
            if key in channel_index:
                violations.append(f"devices[{d_i}].channels[{c_i}]: duplicate io "
                                  f"{spec.io} on device {dev['id']}")
            channel_index[key] = spec.type
            for extra in (spec.flow_io, spec.head_io):
                if extra is not None:
                    ekey = (dev["id"], extra)
                    if ekey in channel_index:
                        violations.append(f"devices[{d_i}].channels[{c_i}]: io {extra} "
                                          f"already used on device {dev['id']}")
                    channel_index[ekey] = "derived"
            channels.append(spec)
        if any(x.device_id == dev["id"] for x in devices):
            violations.append(f"devices[{d_i}]: duplicate device id {dev['id']}")
        devices.append(DeviceSpec(device_id=dev["id"], channels=tuple(channels)))
    sim_mode = broker_url.startswith("loopback")

    # -- actuator and sensor bindings ----------------------------------------
    bindings: list[ActuatorBinding] = []
    by_id: dict[str, ActuatorBinding] = {}
    used_channels: set[tuple[str, int]] = set()
    for a_i, act in enumerate(doc.get("actuators", [])):
        tol = act.get("tolerance",
                      DEFAULT_VALVE_TOLERANCE if act["kind"] == "valve"
                      else DEFAULT_PUMP_TOLERANCE)
        binding = ActuatorBinding(system_id=act["id"], kind=act["kind"],
                                  device=act["device"], io=act["io"],
                                  tolerance=tol, idle_value=act.get("idle_value", 0.0))
        where = f"actuators[{a_i}]"
        if binding.system_id in by_id:
            violations.append(f"{where}: duplicate actuator id {binding.system_id}")
        chan = (binding.device, binding.io)
        if chan in used_channels:
            violations.append(f"{where}: channel {chan} bound twice")
        used_channels.add(chan)
        if sim_mode and devices:
            ctype = channel_index.get(chan)
            if ctype is None:
                violations.append(f"{where}: no simulated channel {chan}")
            elif ctype != binding.kind:
                violations.append(f"{where}: channel {chan} is {ctype}, "
                                  f"binding says {binding.kind}")
        by_id[binding.system_id] = binding
        bindings.append(binding)

    sensors: list[SensorBinding] = []
    sensor_ids: set[str] = set()
    for s_i, sen in enumerate(doc.get("sensors", [])):
        where = f"sensors[{s_i}]"
        sid = sen["id"]
        if sid in sensor_ids or sid in by_id:
            violations.append(f"{where}: duplicate id {sid}")
        sensor_ids.add(sid)
        chan = (sen["device"], sen["io"])
        if chan in used_channels:
            violations.append(f"{where}: channel {chan} bound twice")
        used_channels.add(chan)
        if sim_mode and devices and chan not in channel_index:
            violations.append(f"{where}: no simulated channel {chan}")
        sensors.append(SensorBinding(sensor_id=sid, device=sen["device"], io=sen["io"]))

    # -- resources and lockout plans ------------------------------------------
    resources: dict[str, ResourceSpec] = {}
    for r_i, res in enumerate(doc.get("resources", [])):
        where = f"resources[{r_i}]"
        rid = res["id"]
        if rid in resources:
            violations.append(f"{where}: duplicate resource id {rid}")
        members = tuple(res["actuators"])
        for sid in members:
            if sid not in by_id:
                violations.append(f"{where}: unknown actuator {sid}")
        if "lockout" in res:
            lockout = tuple((e["actuator"], float(e["value"])) for e in res["lockout"])
            for sid, _ in lockout:
                if sid not in members:
                    violations.append(f"{where}: lockout touches {sid}, "
                                      f"not an actuator of {rid}")
        else:
            # default safe state: every member back to its idle value
            lockout = tuple((sid, by_id[sid].idle_value) for sid in members
                            if sid in by_id)
        resources[rid] = ResourceSpec(resource_id=rid, actuators=members, lockout=lockout)

    # -- operations -----------------------------------------------------------
    operations: dict[str, OperationDef] = {}
    priorities_seen: dict[int, str] = {}
    for o_i, op in enumerate(doc.get("operations", [])):
        where = f"operations[{o_i}]"
        op_id = op["id"]
        if op_id in operations:
            violations.append(f"{where}: duplicate operation id {op_id}")
        prio = op["priority"]
        if prio in priorities_seen:
            violations.append(f"{where}: P not unique: priority {prio} already "
                              f"used by {priorities_seen[prio]}")
        priorities_seen.setdefault(prio, op_id)
        boundary: set[str] = set()
        for rid in op["resources"]:
            if rid not in resources:
                violations.append(f"{where}: unknown resource {rid}")
            else:
                boundary.update(resources[rid].actuators)
        steps: list[Step] = []
        final_value: dict[str, float] = {}
        for s_i, raw_step in enumerate(op["steps"]):
            sw = f"{where}.steps[{s_i}]"
            kinds = [k for k in ("group", "condition", "delay") if k in raw_step]
            if len(kinds) != 1:
                violations.append(f"{sw}: step must have exactly one of "
                                  f"group/condition/delay")
                continue
            kind = kinds[0]
            if kind == "group":
                members = tuple((e["actuator"], float(e["value"]))
                                for e in raw_step["group"])
                for sid, _ in members:
                    if sid not in by_id:
                        violations.append(f"{sw}: unknown actuator {sid}")
                    elif sid not in boundary:
                        violations.append(f"{sw}: C2: actuator {sid} outside the "
                                          f"boundary of resources {op['resources']}")
                ids = [m[0] for m in members]
                if len(set(ids)) != len(ids):
                    violations.append(f"{sw}: duplicate actuators within group")
                for sid, value in members:
                    final_value[sid] = value
                steps.append(GroupStep(members=members,
                                       timeout_ms=raw_step.get("timeout_ms",
                                                               DEFAULT_GROUP_TIMEOUT_MS)))
            elif kind == "condition":
                cond = raw_step["condition"]
                wait = abort = None
                try:
                    wait = parse_expr(cond["wait"])
                except ExpressionError as exc:
                    violations.append(f"{sw}: {exc}")
                if "abort_when" in cond:
                    try:
                        abort = parse_expr(cond["abort_when"])
                    except ExpressionError as exc:
                        violations.append(f"{sw}: {exc}")
                for expr in (wait, abort):
                    if expr is None:
                        continue
                    if expr.uses_elapsed:
                        violations.append(f"{sw}: 'elapsed' is a routine trigger "
                                          f"guard, not usable in conditions")
                    for sid in expr.sensors:
                        if sid not in sensor_ids:
                            violations.append(f"{sw}: unknown sensor {sid}")
                if wait is not None:
                    steps.append(ConditionStep(wait=wait, abort_when=abort,
                                               poll_ms=cond.get("poll_ms", DEFAULT_POLL_MS),
                                               timeout_ms=cond["timeout_ms"]))
            else:
                steps.append(DelayStep(duration_ms=raw_step["delay"]["ms"]))

        raw_restore = op.get("idle_restore", "auto")
        if raw_restore == "auto":
            restore = tuple((sid, by_id[sid].idle_value) for sid in final_value
                            if sid in by_id and final_value[sid] != by_id[sid].idle_value)
        else:
            restore = tuple((e["actuator"], float(e["value"])) for e in raw_restore)
            for sid, value in restore:
                if sid not in by_id:
                    violations.append(f"{where}.idle_restore: unknown actuator {sid}")
                elif sid not in boundary:
                    violations.append(f"{where}.idle_restore: C2: {sid} outside boundary")
                else:
                    final_value[sid] = value
            # C3 static check: effective final state must be idle everywhere
            for sid, value in final_value.items():
                if sid in by_id and value != by_id[sid].idle_value:
                    violations.append(f"{where}: C3: {sid} ends at {value}, "
                                      f"idle is {by_id[sid].idle_value}")
        operations[op_id] = OperationDef(op_id=op_id, resources=tuple(op["resources"]),
                                         priority=prio, steps=tuple(steps),
                                         idle_restore=restore,
                                         boundary=frozenset(boundary))

    # -- routines ----------------------------------------------------------------
    routines: dict[str, RoutineDef] = {}
    op_owner: dict[str, str] = {}
    for r_i, rt in enumerate(doc.get("routines", [])):
        where = f"routines[{r_i}]"
        rid = rt["id"]
        if rid in routines:
            violations.append(f"{where}: duplicate routine id {rid}")
        states = tuple(rt["states"])
        if rt["initial"] not in states:
            violations.append(f"{where}: initial state {rt['initial']} not in states")
        owned = tuple(rt["owns"])
        for op_id in owned:
            if op_id not in operations:
                violations.append(f"{where}: owns unknown operation {op_id}")
            if op_id in op_owner:
                violations.append(f"{where}: ownership exclusivity: {op_id} already "
                                  f"owned by {op_owner[op_id]}")
            op_owner.setdefault(op_id, rid)
        transitions: list[Transition] = []
        for t_i, tr in enumerate(rt["transitions"]):
            tw = f"{where}.transitions[{t_i}]"
            if tr["from"] not in states:
                violations.append(f"{tw}: unknown source state {tr['from']}")
            if tr["to"] not in states:
                violations.append(f"{tw}: unknown target state {tr['to']}")
            if tr["run"] not in owned:
                violations.append(f"{tw}: operation {tr['run']} not owned by {rid}")
            when = tr["when"]
            if when.startswith(EXTERNAL_PREFIX):
                trigger: Any = when
            else:
                try:
                    trigger = parse_expr(when)
                    for sid in trigger.sensors:
                        if sid not in sensor_ids:
                            violations.append(f"{tw}: unknown sensor {sid}")
                except ExpressionError as exc:
                    violations.append(f"{tw}: {exc}")
                    trigger = None
            if trigger is not None:
                transitions.append(Transition(source=tr["from"], trigger=trigger,
                                              op_id=tr["run"], target=tr["to"]))
        routines[rid] = RoutineDef(routine_id=rid, states=states, initial=rt["initial"],
                                   owned_ops=owned, transitions=tuple(transitions),
                                   eval_period_ms=rt.get("eval_period_ms", 1000),
                                   fault_policy=rt.get("fault_policy", "halt"),
                                   autostart=rt.get("autostart", True))

    if violations:
        raise ConfigError(violations)

    return PlantConfig(
        broker_url=broker_url,
        clock_mode=clock_cfg.get("mode", "simulated"),
        origin_ms=clock_cfg.get("origin_ms"),
        seed=clock_cfg.get("seed", 1),
        log_path=doc.get("log", {}).get("path"),
        timings=timings,
        link_delay=link_delay,
        link_delay_overrides=overrides,
        duplicate_probability=sim_cfg.get("duplicate_probability", 0.0),
        devices=devices,
        bindings=bindings,
        sensors=sensors,
        resources=resources,
        operations=operations,
        routines=routines,
        scan=scan,
        watchdog=watchdog,
        raw=doc,
    )


def load(path: str | Path) -> PlantConfig:
    return validate(load_document(path))
