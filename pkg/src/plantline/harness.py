"""Process lifecycle: boot all layers against one bus, run scenarios.

The Supervisor owns construction order and the subscriptions that tie the
layers together. Under the simulated clock a run is fully deterministic:
identical config and scenario produce identical event logs modulo the
wall-time origin. Manual controls arrive either through `inject()` or the
`sys/ctl/<verb>` control topic, which carry the same verbs as scenario
actions.
"""

from __future__ import annotations

import logging
from pathlib import Path
from random import Random
from typing import Any

import yaml

from .actuators import ActuatorLayer
from .bus import DelayModel, Envelope, LoopbackBus, MqttBus, QOS_AT_LEAST_ONCE, make_bus
from .clock import Scheduler, SimClock, WallClock
from .config import PlantConfig
from .conditions import SensorContext
from .events import EventLog
from .groups import GroupCommander
from .interlock import Interlock
from .operations import OperationEngine
from .routines import RoutineEngine
from .sim import PlantSim, trace_from_config

logger = logging.getLogger(__name__)


class ScenarioError(ValueError):
    pass


class Supervisor:
    def __init__(self, config: PlantConfig, *, log_path: str | None = None) -> None:
        self.config = config
        self._log_path = log_path if log_path is not None else config.log_path
        self.booted = False
        self._lockout_counter = 0

    # -- boot ------------------------------------------------------------------

    def boot(self) -> "Supervisor":
        cfg = self.config
        if cfg.clock_mode == "simulated":
            origin = cfg.origin_ms if cfg.origin_ms is not None else WallClock().now_ms()
            self.clock = SimClock(origin)
        else:
            self.clock = WallClock()
        self.scheduler = Scheduler(self.clock)
        self.log = EventLog(self._log_path)
        self.rng = Random(cfg.seed)

        self.bus = make_bus(cfg.broker_url, self.scheduler, self.clock,
                            rng=Random(f"{cfg.seed}:bus"),
                            default_delay=cfg.link_delay,
                            duplicate_probability=cfg.duplicate_probability)
        if isinstance(self.bus, LoopbackBus):
            for device, model in sorted(cfg.link_delay_overrides.items()):
                self.bus.set_link_delay(device, model)

        self.ctx = SensorContext()
        self.actuators = ActuatorLayer(self.bus, self.scheduler, self.clock, self.log,
                                       scan=cfg.scan, notify=self._notify)
        for binding in cfg.bindings:
            self.actuators.add_binding(binding)
        self.groups = GroupCommander(self.actuators, self.clock, self.log)
        self.interlock = Interlock(sorted(cfg.resources), cfg.priorities,
                                   self.clock, self.log,
                                   lockout_dispatch=self._dispatch_lockout,
                                   notify=self._notify, watchdog=cfg.watchdog)
        self.operations = OperationEngine(cfg.operations, self.interlock, self.groups,
                                          self.ctx, self.scheduler, self.clock,
                                          self.log, notify=self._notify)
        self.routines = RoutineEngine(cfg.routines, self.operations, self.ctx,
                                      self.scheduler, self.clock, self.log)

        self._sensor_by_channel = {(s.device, s.io): s.sensor_id for s in cfg.sensors}
        self.bus.subscribe("dev/+/io/+/state", self._on_state)
        self.bus.subscribe("dev/+/status", self._on_status)
        self.bus.subscribe("dev/+/telemetry", self._on_telemetry)
        self.bus.subscribe("sys/ctl/#", self._on_control)
        self.actuators.attach()
        self.interlock.attach(self.scheduler)

        self.sim: PlantSim | None = None
        if isinstance(self.bus, LoopbackBus) and cfg.devices:
            self.sim = PlantSim(self.bus, self.scheduler, self.clock, cfg.seed,
                                cfg.timings, self.log)
            for spec in cfg.devices:
                dev = self.sim.add_device(spec.device_id)
                for ch in spec.channels:
                    if ch.type == "valve":
                        dev.add_valve(ch.io, sweep_time_s=ch.sweep_time_s)
                    elif ch.type == "pump":
                        dev.add_pump(ch.io, flow_io=ch.flow_io, head_io=ch.head_io,
                                     nominal_flow=ch.nominal_flow)
                    else:
                        dev.add_sensor(ch.io, trace_from_config(
                            ch.trace, t0_ms=self.clock.now_ms()))
            self.sim.start()

        self.routines.attach()
        self.log.record(self.clock.now_ms(), "harness", "booted",
                        devices=len(cfg.devices), operations=len(cfg.operations),
                        routines=len(cfg.routines))
        self.booted = True
        return self

    # -- layer glue -----------------------------------------------------------

    def _dispatch_lockout(self, resource: str, fault_ref: str) -> str:
        self._lockout_counter += 1
        token = f"lockout-{resource}-{self._lockout_counter}"
        plan = self.config.resources[resource].lockout
        if not plan:
            return token
        self.groups.dispatch_group(list(plan), token, force=True)
        return token

    def _notify(self, diag: dict) -> None:
        try:
            self.bus.publish(Envelope.json("sys/notify", diag, qos=QOS_AT_LEAST_ONCE,
                                           source_ts=self.clock.now_ms()))
        except Exception:
            logger.exception("failed to publish diagnostic")

    def _on_state(self, env: Envelope) -> None:
        parts = env.topic.split("/")
        device, io = parts[1], int(parts[3])
        doc = env.payload_json()
        recv = env.recv_ts if env.recv_ts is not None else self.clock.now_ms()
        self.log.record(recv, "bus", "state", subject=device,
                        io=io, value=doc.get("value"), source_ts=env.source_ts)
        sensor_id = self._sensor_by_channel.get((device, io))
        if sensor_id is not None:
            self.ctx.update(sensor_id, float(doc["value"]), recv)

    def _on_status(self, env: Envelope) -> None:
        device = env.topic.split("/")[1]
        recv = env.recv_ts if env.recv_ts is not None else self.clock.now_ms()
        self.log.record(recv, "bus", "status", subject=device,
                        status=env.payload.decode("utf-8", "replace"))

    def _on_telemetry(self, env: Envelope) -> None:
        device = env.topic.split("/")[1]
        recv = env.recv_ts if env.recv_ts is not None else self.clock.now_ms()
        doc = env.payload_json()
        self.log.record(recv, "bus", "telemetry", subject=device,
                        source_ts=env.source_ts, uptime_s=doc.get("uptime_s"),
                        rssi=doc.get("rssi"))

    # -- manual controls ----------------------------------------------------------

    def _on_control(self, env: Envelope) -> None:
        verb = env.topic.split("/", 2)[2]
        try:
            args = env.payload_json() if env.payload else {}
        except ValueError:
            logger.warning("malformed control payload on %s", env.topic)
            return
        try:
            self.inject(verb, **args)
        except Exception as exc:
            logger.warning("control %s failed: %s", verb, exc)

    def inject(self, verb: str, **args: Any) -> None:
        """Manual operator actions; same vocabulary as scenario steps."""
        self.log.record(self.clock.now_ms(), "harness", "inject", subject=verb,
                        **{k: v for k, v in args.items() if isinstance(v, (str, int, float, bool))})
        if verb == "fault":
            self.operations.fault_manually(args["op_id"])
        elif verb == "clear":
            self.interlock.clear_fault(args["resource"])
            for system_id in self.config.resources[args["resource"]].actuators:
                self.actuators.clear_fault(system_id)
        elif verb == "run_operation":
            self.operations.run_operation(args["op_id"])
        elif verb == "activate_routine":
            self.routines.set_routine_active(args["routine_id"], True)
        elif verb == "deactivate_routine":
            self.routines.set_routine_active(args["routine_id"], False)
        elif verb == "trigger":
            self.routines.external_trigger(args["routine_id"], args["name"])
        elif verb == "disconnect":
            self._sim_device(args["device"]).set_link_state(False)
        elif verb == "reconnect":
            self._sim_device(args["device"]).set_link_state(True)
        elif verb == "inject_stuck_valve":
            self._sim_device(args["device"]).inject_stuck_valve(
                args["io"], args.get("stuck", True))
        elif verb == "set_sensor_trace":
            dev = self._sim_device(args["device"])
            dev.set_sensor_trace(args["io"], trace_from_config(
                args["trace"], t0_ms=self.clock.now_ms()))
        else:
            raise ScenarioError(f"unknown verb {verb!r}")

    def _sim_device(self, device_id: str):
        if self.sim is None:
            raise ScenarioError("no simulator configured")
        return self.sim.device(device_id)

    # -- scenario execution --------------------------------------------------------

    def run_scenario(self, scenario: dict | None, until_s: float | None = None) -> None:
        if not self.booted:
            self.boot()
        if not isinstance(self.clock, SimClock):
            raise ScenarioError("scenario execution requires the simulated clock")
        horizon_s = until_s
        if scenario:
            for i, action in enumerate(scenario.get("actions", [])):
                if "at_ms" not in action or "action" not in action:
                    raise ScenarioError(f"actions[{i}]: needs at_ms and action")
                at = self.clock.now_ms() + int(action["at_ms"])
                params = {k: v for k, v in action.items() if k not in ("at_ms", "action")}
                self.scheduler.call_at(
                    at, lambda v=action["action"], p=params: self.inject(v, **p))
            if horizon_s is None:
                horizon_s = scenario.get("until_s")
        if horizon_s is None:
            raise ScenarioError("no horizon: pass until_s or put until_s in the scenario")
        self.scheduler.run_until(self.clock.now_ms() + int(horizon_s * 1000))

    def run_for(self, seconds: float) -> None:
        self.scheduler.run_until(self.clock.now_ms() + int(seconds * 1000))

    def shutdown(self) -> None:
        self.log.record(self.clock.now_ms(), "harness", "shutdown")
        if isinstance(self.bus, MqttBus):
            self.bus.close()
        self.log.close()


def load_scenario(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "actions" not in doc:
        raise ScenarioError(f"{path}: scenario must be a mapping with an actions list")
    return doc
