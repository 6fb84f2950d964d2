"""Automation routines: state machines dispatching owned operations.

A routine periodically evaluates the transitions leaving its current
state (declaration order breaks ties) and dispatches at most one owned
operation at a time; the operation's return moves the state machine.
Operation ownership is exclusive across routines, which together with the
single-pending rule makes duplicate-run rejections structurally
impossible: seeing one is an assertion failure, not a recoverable error.

External triggers arrive as latched flags and are consumed by the next
evaluation, so they obey the same single-pending discipline as periodic
ticks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .clock import Clock, Scheduler
from .conditions import Expr, MissingSensor, SensorContext
from .events import EventLog
from .operations import OperationBusy, OperationEngine, OperationRun, PHASE_DONE

logger = logging.getLogger(__name__)

FAULT_POLICY_HALT = "halt"   # deactivate on owned-op fault, manual restart
FAULT_POLICY_HOLD = "hold"   # stay in state, keep evaluating

EXTERNAL_PREFIX = "external:"


@dataclass(frozen=True)
class Transition:
    source: str
    trigger: Expr | str     # Expr, or "external:<name>"
    op_id: str
    target: str


@dataclass(frozen=True)
class RoutineDef:
    routine_id: str
    states: tuple[str, ...]
    initial: str
    owned_ops: tuple[str, ...]
    transitions: tuple[Transition, ...]
    eval_period_ms: int = 1000
    fault_policy: str = FAULT_POLICY_HALT
    autostart: bool = True


@dataclass
class RoutineRun:
    routine_id: str
    current: str
    active: bool
    entered_state_ts: int
    pending_op: str = ""          # run token of the in-flight operation
    latched: set[str] = field(default_factory=set)  # external trigger names


class RoutineEngine:
    def __init__(self, defs: dict[str, RoutineDef], ops: OperationEngine,
                 ctx: SensorContext, scheduler: Scheduler, clock: Clock,
                 log: EventLog) -> None:
        self.defs = dict(defs)
        self.ops = ops
        self.ctx = ctx
        self.scheduler = scheduler
        self.clock = clock
        self.log = log
        self.runs: dict[str, RoutineRun] = {}
        owners: dict[str, str] = {}
        for rid in sorted(self.defs):
            for op_id in self.defs[rid].owned_ops:
                if op_id in owners:
                    raise ValueError(
                        f"operation {op_id} owned by both {owners[op_id]} and {rid}")
                owners[op_id] = rid

    def attach(self) -> None:
        now = self.clock.now_ms()
        for rid in sorted(self.defs):
            d = self.defs[rid]
            self.runs[rid] = RoutineRun(routine_id=rid, current=d.initial,
                                        active=d.autostart, entered_state_ts=now)
            self.scheduler.every(d.eval_period_ms, lambda r=rid: self.routine_tick(r))

    # -- trigger evaluation ------------------------------------------------------

    def routine_tick(self, routine_id: str) -> None:
        run = self.runs[routine_id]
        if not run.active or run.pending_op:
            return
        d = self.defs[routine_id]
        now = self.clock.now_ms()
        elapsed_s = (now - run.entered_state_ts) / 1000.0
        for transition in d.transitions:
            if transition.source != run.current:
                continue
            if self._satisfied(run, transition, elapsed_s):
                self._dispatch(run, transition)
                return

    def _satisfied(self, run: RoutineRun, transition: Transition, elapsed_s: float) -> bool:
        trig = transition.trigger
        if isinstance(trig, str):
            name = trig[len(EXTERNAL_PREFIX):]
            if name in run.latched:
                run.latched.discard(name)
                return True
            return False
        try:
            return trig.evaluate(self.ctx, elapsed_s=elapsed_s)
        except MissingSensor:
            # sensor stream not up yet (boot order); trigger stays unsatisfied
            return False

    def _dispatch(self, run: RoutineRun, transition: Transition) -> None:
        now = self.clock.now_ms()
        self.log.record(now, "routine", "dispatch", subject=run.routine_id,
                        source=run.current, op=transition.op_id, to=transition.target)
        try:
            op_run = self.ops.run_operation(
                transition.op_id,
                on_result=lambda res: self._on_op_result(run, transition, res))
        except OperationBusy:
            # impossible by ownership exclusivity + single-pending; see module doc
            raise AssertionError(
                f"{run.routine_id}: owned operation {transition.op_id} already live")
        run.pending_op = op_run.run_token

    def _on_op_result(self, run: RoutineRun, transition: Transition,
                      result: OperationRun) -> None:
        run.pending_op = ""
        now = self.clock.now_ms()
        if result.phase == PHASE_DONE:
            previous = run.current
            run.current = transition.target
            run.entered_state_ts = now
            self.log.record(now, "routine", "transition", subject=run.routine_id,
                            token=result.run_token, source=previous, to=run.current)
            return
        policy = self.defs[run.routine_id].fault_policy
        self.log.record(now, "routine", "op_faulted", subject=run.routine_id,
                        token=result.run_token, policy=policy, cause=result.cause)
        if policy == FAULT_POLICY_HALT:
            run.active = False
            self.log.record(now, "routine", "halted", subject=run.routine_id,
                            cause=result.cause)

    # -- controls ------------------------------------------------------------------

    def set_routine_active(self, routine_id: str, active: bool) -> None:
        if routine_id not in self.runs:
            raise KeyError(f"unknown routine {routine_id}")
        run = self.runs[routine_id]
        if run.active == active:
            return
        run.active = active
        # deactivation never aborts the pending operation, only new dispatches
        self.log.record(self.clock.now_ms(), "routine",
                        "activated" if active else "deactivated", subject=routine_id)

    def external_trigger(self, routine_id: str, name: str) -> None:
        if routine_id not in self.runs:
            raise KeyError(f"unknown routine {routine_id}")
        self.runs[routine_id].latched.add(name)
        self.log.record(self.clock.now_ms(), "routine", "external_trigger",
                        subject=routine_id, name=name)
