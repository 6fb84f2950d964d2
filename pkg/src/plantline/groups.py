"""Group commands: the single entry point for actuation.

A group fans a multi-actuator request out into individual dispatches, all
carrying the group's correlation token, and returns to its caller once the
last member completes. Admission is all-or-nothing: a group touching an
unknown or fault-locked actuator performs zero dispatches. No timeouts
here; the layer above owns them per operation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from .actuators import ActuatorLayer, UnknownActuator
from .clock import Clock
from .events import EventLog

logger = logging.getLogger(__name__)


class GroupRejected(RuntimeError):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class GroupRequest:
    group_token: str
    members: tuple[tuple[str, float], ...]  # (system_id, value), order preserved
    issued_ts: int

    def __post_init__(self) -> None:
        if not self.members:
            raise GroupRejected("empty group")
        ids = [m[0] for m in self.members]
        if len(set(ids)) != len(ids):
            raise GroupRejected(f"duplicate members in group: {ids}")


@dataclass
class GroupLedgerEntry:
    group_token: str
    pending: set[str]
    issued_ts: int
    on_complete: Callable[[str], None] | None = None
    members: tuple[tuple[str, float], ...] = field(default=())


class GroupCommander:
    def __init__(self, actuators: ActuatorLayer, clock: Clock, log: EventLog) -> None:
        self.actuators = actuators
        self.clock = clock
        self.log = log
        self.ledger: dict[str, GroupLedgerEntry] = {}
        actuators.on_completion(self.on_member_complete)

    def dispatch_group(self, members: list[tuple[str, float]], group_token: str,
                       on_complete: Callable[[str], None] | None = None,
                       *, force: bool = False) -> GroupRequest:
        """`force` bypasses fault-lock admission: used by the interlock's
        lockout path, which must always reach the healthy actuators."""
        now = self.clock.now_ms()
        req = GroupRequest(group_token=group_token,
                           members=tuple((str(i), float(v)) for i, v in members),
                           issued_ts=now)
        if group_token in self.ledger:
            raise GroupRejected(f"group token {group_token} already active")
        for system_id, _ in req.members:
            try:
                record = self.actuators.record_of(system_id)
            except UnknownActuator:
                self.log.record(now, "group", "group_rejected", token=group_token,
                                reason=f"unknown actuator {system_id}")
                raise GroupRejected(f"unknown actuator {system_id}") from None
            if not force and record.fault is not None:
                self.log.record(now, "group", "group_rejected", token=group_token,
                                reason=f"fault-locked member {system_id}")
                raise GroupRejected(f"member {system_id} is fault-locked")

        entry = GroupLedgerEntry(group_token=group_token,
                                 pending=set(m[0] for m in req.members),
                                 issued_ts=now, on_complete=on_complete,
                                 members=req.members)
        self.ledger[group_token] = entry
        self.log.record(now, "group", "group_dispatch", token=group_token,
                        members=[[i, v] for i, v in req.members], force=force)
        for system_id, value in req.members:
            self.actuators.dispatch(system_id, value, group_token, force=force)
        return req

    def on_member_complete(self, system_id: str, group_token: str) -> None:
        entry = self.ledger.get(group_token)
        if entry is None:
            logger.warning("late completion for closed group %s (member %s)",
                           group_token, system_id)
            self.log.record(self.clock.now_ms(), "group", "late_completion",
                            subject=system_id, token=group_token)
            return
        entry.pending.discard(system_id)
        if not entry.pending:
            del self.ledger[group_token]
            now = self.clock.now_ms()
            self.log.record(now, "group", "group_complete", token=group_token,
                            duration_ms=now - entry.issued_ts)
            if entry.on_complete is not None:
                entry.on_complete(group_token)
