"""Singular operations: lock, command groups, condition fulfillment, release.

An operation is a deterministic straight-line sequence. Three conditions
are enforced: only one live run per operation id (C1), every commanded
actuator lies inside the boundary of the acquired resources (C2, checked
statically at load and again at each dispatch), and all touched actuators
are restored to their idle value before release (C3, restored then
asserted).

Any step timeout or condition anomaly routes to one catch path: the run
is marked faulted, the interlock locks out the owned resources and issues
the safe-state groups, and no idle restore is attempted since the lockout
plan is the safe state.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

from .clock import Clock, Scheduler, Timer
from .conditions import Expr, MissingSensor, SensorContext
from .events import EventLog
from .groups import GroupCommander, GroupRejected
from .interlock import Interlock

logger = logging.getLogger(__name__)

DEFAULT_GROUP_TIMEOUT_MS = 30_000
DEFAULT_POLL_MS = 1000  # aligned with the 1 Hz data rate; faster buys nothing


class OperationBusy(RuntimeError):
    """C1: a run for this operation id is already live."""


class UnknownOperation(KeyError):
    pass


class BoundaryViolation(RuntimeError):
    """C2: a step references an actuator outside the acquired resources."""


class ProcessAnomaly(RuntimeError):
    """Raised from condition evaluation; routes to the fault path."""


@dataclass(frozen=True)
class GroupStep:
    members: tuple[tuple[str, float], ...]
    timeout_ms: int = DEFAULT_GROUP_TIMEOUT_MS


@dataclass(frozen=True)
class ConditionStep:
    wait: Expr
    timeout_ms: int
    abort_when: Expr | None = None
    poll_ms: int = DEFAULT_POLL_MS


@dataclass(frozen=True)
class DelayStep:
    duration_ms: int


Step = GroupStep | ConditionStep | DelayStep


@dataclass(frozen=True)
class OperationDef:
    op_id: str
    resources: tuple[str, ...]
    priority: int
    steps: tuple[Step, ...]
    idle_restore: tuple[tuple[str, float], ...]
    boundary: frozenset[str]  # actuators belonging to the declared resources

    def touched_actuators(self) -> list[str]:
        ids: dict[str, None] = {}
        for step in self.steps:
            if isinstance(step, GroupStep):
                for system_id, _ in step.members:
                    ids.setdefault(system_id)
        for system_id, _ in self.idle_restore:
            ids.setdefault(system_id)
        return list(ids)


PHASE_WAITING = "waiting_lock"
PHASE_RUNNING = "running"
PHASE_RELEASING = "releasing"
PHASE_DONE = "done"
PHASE_FAULTED = "faulted"


@dataclass
class OperationRun:
    op_id: str
    run_token: str
    phase: str = PHASE_WAITING
    step_index: int = -1
    requested_ts: int = 0
    started_ts: int | None = None    # interlock grant
    ended_ts: int | None = None      # release
    cause: str = ""
    on_result: Callable[["OperationRun"], None] | None = None
    _step_timer: Timer | None = field(default=None, repr=False)
    _poll_timer: Timer | None = field(default=None, repr=False)
    _active_group: str = ""

    @property
    def alive(self) -> bool:
        return self.phase not in (PHASE_DONE, PHASE_FAULTED)


class OperationEngine:
    def __init__(self, defs: dict[str, OperationDef], interlock: Interlock,
                 groups: GroupCommander, ctx: SensorContext, scheduler: Scheduler,
                 clock: Clock, log: EventLog,
                 notify: Callable[[dict], None] | None = None) -> None:
        self.defs = dict(defs)
        self.interlock = interlock
        self.groups = groups
        self.ctx = ctx
        self.scheduler = scheduler
        self.clock = clock
        self.log = log
        self.notify = notify or (lambda diag: None)
        self.live: dict[str, OperationRun] = {}   # by op_id (C1)
        self.runs: dict[str, OperationRun] = {}   # by run token, full history
        self._counter = itertools.count(1)

    # -- entry point -----------------------------------------------------------

    def run_operation(self, op_id: str,
                      on_result: Callable[[OperationRun], None] | None = None) -> OperationRun:
        if op_id not in self.defs:
            raise UnknownOperation(op_id)
        if op_id in self.live:
            self.log.record(self.clock.now_ms(), "operation", "rejected_c1",
                            subject=op_id, token=self.live[op_id].run_token)
            raise OperationBusy(f"{op_id} already has a live run (C1)")
        now = self.clock.now_ms()
        run = OperationRun(op_id=op_id, run_token=f"run-{op_id}-{next(self._counter)}",
                           requested_ts=now, on_result=on_result)
        self.live[op_id] = run
        self.runs[run.run_token] = run
        self.log.record(now, "operation", "run_requested", subject=op_id,
                        token=run.run_token)
        granted = self.interlock.acquire(
            op_id, self.defs[op_id].resources, run.run_token,
            grant_cb=lambda token: self._on_grant(run))
        if granted:
            self._on_grant(run)
        else:
            self.log.record(now, "operation", "waiting_lock", subject=op_id,
                            token=run.run_token)
        return run

    # -- step machine -------------------------------------------------------------

    def _on_grant(self, run: OperationRun) -> None:
        if not run.alive or run.phase != PHASE_WAITING:
            return
        run.started_ts = self.clock.now_ms()
        run.phase = PHASE_RUNNING
        self.log.record(run.started_ts, "operation", "grant", subject=run.op_id,
                        token=run.run_token,
                        queued_ms=run.started_ts - run.requested_ts)
        self._advance(run)

    def _advance(self, run: OperationRun) -> None:
        if not run.alive:
            return
        run.step_index += 1
        steps = self.defs[run.op_id].steps
        if run.step_index < len(steps):
            self._start_step(run, steps[run.step_index])
        else:
            self._idle_restore(run)

    def _start_step(self, run: OperationRun, step: Step) -> None:
        now = self.clock.now_ms()
        self.log.record(now, "operation", "step_started", subject=run.op_id,
                        token=run.run_token, index=run.step_index,
                        step=type(step).__name__)
        if isinstance(step, GroupStep):
            self._dispatch_group_step(run, step)
        elif isinstance(step, ConditionStep):
            run._step_timer = self.scheduler.call_later(
                step.timeout_ms, self._on_timeout, run, run.step_index, "condition")
            self._poll_condition(run, step, first=True)
        elif isinstance(step, DelayStep):
            run._step_timer = self.scheduler.call_later(
                step.duration_ms, self._on_delay_done, run, run.step_index)

    def _dispatch_group_step(self, run: OperationRun, step: GroupStep,
                             restoring: bool = False) -> None:
        boundary = self.defs[run.op_id].boundary
        outside = [sid for sid, _ in step.members if sid not in boundary]
        if outside:
            # C2 runtime backstop; validation should have caught this
            self.log.record(self.clock.now_ms(), "operation", "c2_violation",
                            subject=run.op_id, token=run.run_token, actuators=outside)
            self._fail(run, f"C2 violation: {outside} outside acquired boundary")
            return
        token = f"{run.run_token}.g{run.step_index}" if not restoring else f"{run.run_token}.restore"
        index = run.step_index
        try:
            self.groups.dispatch_group(
                list(step.members), token,
                on_complete=lambda t: self._on_group_done(run, index, restoring))
        except GroupRejected as exc:
            self._fail(run, f"group rejected: {exc.reason}")
            return
        run._active_group = token
        run._step_timer = self.scheduler.call_later(
            step.timeout_ms, self._on_timeout, run, index,
            "idle_restore" if restoring else "group")

    def _on_group_done(self, run: OperationRun, index: int, restoring: bool) -> None:
        if not run.alive or run.step_index != index:
            logger.warning("%s: late group completion ignored", run.run_token)
            return
        self._cancel_timers(run)
        run._active_group = ""
        if restoring:
            self._finish(run)
        else:
            self._advance(run)

    def _poll_condition(self, run: OperationRun, step: ConditionStep, first: bool = False) -> None:
        if not run.alive or not isinstance(step, ConditionStep):
            return
        try:
            if step.abort_when is not None and step.abort_when.evaluate(self.ctx):
                raise ProcessAnomaly(f"abort condition met: {step.abort_when.text}")
            satisfied = step.wait.evaluate(self.ctx)
        except ProcessAnomaly as exc:
            self._fail(run, str(exc))
            return
        except MissingSensor as exc:
            self._fail(run, f"missing sensor in condition: {exc}")
            return
        if satisfied:
            self._cancel_timers(run)
            self.log.record(self.clock.now_ms(), "operation", "condition_met",
                            subject=run.op_id, token=run.run_token, index=run.step_index)
            self._advance(run)
        else:
            run._poll_timer = self.scheduler.call_later(
                step.poll_ms, self._poll_condition, run, step)

    def _on_delay_done(self, run: OperationRun, index: int) -> None:
        if not run.alive or run.step_index != index:
            return
        self._advance(run)

    def _on_timeout(self, run: OperationRun, index: int, step_kind: str) -> None:
        if not run.alive or run.step_index != index:
            return
        self._fail(run, f"{step_kind} step {index} timeout")

    # -- completion paths --------------------------------------------------------

    def _idle_restore(self, run: OperationRun) -> None:
        run.phase = PHASE_RELEASING
        restore = self.defs[run.op_id].idle_restore
        now = self.clock.now_ms()
        self.log.record(now, "operation", "idle_restore", subject=run.op_id,
                        token=run.run_token, members=[[i, v] for i, v in restore])
        if restore:
            self._dispatch_group_step(
                run, GroupStep(members=restore, timeout_ms=DEFAULT_GROUP_TIMEOUT_MS),
                restoring=True)
        else:
            self._finish(run)

    def _finish(self, run: OperationRun) -> None:
        # C3: every touched actuator must sit at its commanded idle value now
        mismatches = []
        for system_id in self.defs[run.op_id].touched_actuators():
            record = self.groups.actuators.record_of(system_id)
            idle = self.groups.actuators.binding_of(system_id).idle_value
            if record.target is not None and record.target != idle:
                mismatches.append((system_id, record.target, idle))
        if mismatches:
            self.log.record(self.clock.now_ms(), "operation", "c3_violation",
                            subject=run.op_id, token=run.run_token,
                            mismatches=[list(m) for m in mismatches])
            self._fail(run, f"C3 violation: not restored to idle: {mismatches}")
            return
        now = self.clock.now_ms()
        run.ended_ts = now
        run.phase = PHASE_DONE
        self.log.record(now, "operation", "release", subject=run.op_id,
                        token=run.run_token,
                        runtime_ms=now - (run.started_ts or now))
        self.interlock.release(run.op_id, run.run_token)
        self.live.pop(run.op_id, None)
        self.log.record(now, "operation", "done", subject=run.op_id, token=run.run_token)
        if run.on_result is not None:
            run.on_result(run)

    def _fail(self, run: OperationRun, cause: str) -> None:
        if not run.alive:
            return
        self._cancel_timers(run)
        now = self.clock.now_ms()
        run.phase = PHASE_FAULTED
        run.cause = cause
        run.ended_ts = now
        had_lock = run.started_ts is not None
        self.log.record(now, "operation", "faulted", subject=run.op_id,
                        token=run.run_token, cause=cause)
        self.notify({"layer": "operation", "event": "faulted", "op_id": run.op_id,
                     "token": run.run_token, "cause": cause})
        self.live.pop(run.op_id, None)
        if had_lock:
            self.interlock.fault(run.op_id, run.run_token, cause=cause)
        else:
            self.interlock.cancel(run.op_id)
        if run.on_result is not None:
            run.on_result(run)

    def fault_manually(self, op_id: str, cause: str = "manual trigger") -> None:
        """Batch analog of the e-stop: same catch path as an internal error."""
        run = self.live.get(op_id)
        if run is not None:
            self._fail(run, cause)
        else:
            self.interlock.fault(op_id, f"manual-{op_id}", cause=cause)

    def _cancel_timers(self, run: OperationRun) -> None:
        if run._step_timer is not None:
            run._step_timer.cancel()
            run._step_timer = None
        if run._poll_timer is not None:
            run._poll_timer.cancel()
            run._poll_timer = None
