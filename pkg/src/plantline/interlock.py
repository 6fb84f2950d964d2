"""Resource interlock: asynchronous mutual exclusion with priority queueing.

Grants are all-or-nothing over the full wanted set, so hold-and-wait
cycles cannot form and no deadlock detection is needed. A release frees
the holder's resources, then walks the queue in descending priority,
granting every entry whose complete wanted set is free; the walk checks
global free state, so entries blocked on resources freed earlier are
picked up too. Priorities are unique by construction (the config loader
rejects duplicates), which makes grant order total and deterministic.

A fault marks every resource owned by the faulting operation, dispatches
that resource's predefined lockout group, and blocks grants until a
manual clear. Starvation of low priorities under a steady high-priority
stream is accepted behavior; the elapsed-time watchdog is the mitigation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from .clock import Clock, Scheduler
from .events import EventLog

logger = logging.getLogger(__name__)

FREE = None
FAULT = "fault"


class UnknownOperationPriority(KeyError):
    pass


class ResourceNotFaulted(RuntimeError):
    pass


@dataclass
class QueueEntry:
    op_id: str
    wanted: tuple[str, ...]
    priority: int
    call_token: str
    grant_cb: Callable[[str], None] | None
    enqueued_ts: int
    warned: bool = False


@dataclass
class Ownership:
    op_id: str
    since_ts: int
    warned: bool = False


@dataclass
class WatchdogConfig:
    period_ms: int = 10_000
    queue_warn_ms: int = 600_000
    hold_warn_ms: int = 600_000


class Interlock:
    def __init__(self, resources: list[str], priorities: dict[str, int],
                 clock: Clock, log: EventLog, *,
                 lockout_dispatch: Callable[[str, str], str] | None = None,
                 notify: Callable[[dict], None] | None = None,
                 watchdog: WatchdogConfig | None = None) -> None:
        """lockout_dispatch(resource, fault_ref) issues the resource's safe-state
        group and returns its group token (wired to the group layer by the
        harness; tests may stub it)."""
        seen = set()
        for op_id, p in priorities.items():
            if p in seen:
                raise ValueError(f"duplicate priority {p} (op {op_id}); P must be unique")
            seen.add(p)
        self.resources = list(resources)
        self.priorities = dict(priorities)
        self.clock = clock
        self.log = log
        self.lockout_dispatch = lockout_dispatch or (lambda r, ref: "")
        self.notify = notify or (lambda diag: None)
        self.watchdog_cfg = watchdog or WatchdogConfig()
        self.ownership: dict[str, str] = {r: FREE for r in resources}  # O[r]
        self.queue: list[QueueEntry] = []                              # Q
        self._held_since: dict[str, Ownership] = {}                    # by op_id
        self._watchdog_timer = None

    def attach(self, scheduler: Scheduler) -> None:
        self._watchdog_timer = scheduler.every(self.watchdog_cfg.period_ms, self.watchdog)

    # -- core algorithms ----------------------------------------------------

    def acquire(self, op_id: str, wanted: list[str] | tuple[str, ...], call_token: str,
                grant_cb: Callable[[str], None] | None = None) -> bool:
        """Returns True when granted immediately; otherwise the request is
        queued (or swallowed if op_id is already queued) and grant_cb fires
        with the original call token at a later release or fault clear."""
        if op_id not in self.priorities:
            raise UnknownOperationPriority(op_id)
        wanted_t = tuple(wanted)
        if not wanted_t:
            raise ValueError("acquire with empty resource set")
        for r in wanted_t:
            if r not in self.ownership:
                raise KeyError(f"unknown resource {r}")
        now = self.clock.now_ms()
        if all(self.ownership[r] is FREE for r in wanted_t):
            for r in wanted_t:
                self.ownership[r] = op_id
            self._held_since[op_id] = Ownership(op_id, now)
            self.log.record(now, "interlock", "acquire_granted", subject=op_id,
                            token=call_token, resources=list(wanted_t))
            return True
        if not any(entry.op_id == op_id for entry in self.queue):
            self.queue.append(QueueEntry(op_id, wanted_t, self.priorities[op_id],
                                         call_token, grant_cb, now))
            self.log.record(now, "interlock", "acquire_queued", subject=op_id,
                            token=call_token, resources=list(wanted_t),
                            priority=self.priorities[op_id])
        return False

    def release(self, op_id: str, call_token: str = "") -> list[str]:
        """Free everything op_id owns, then re-evaluate the queue. Returns the
        call tokens granted as a consequence, in grant order."""
        now = self.clock.now_ms()
        for r in self.resources:
            if self.ownership[r] == op_id:
                self.ownership[r] = FREE
        self._held_since.pop(op_id, None)
        self.log.record(now, "interlock", "release", subject=op_id, token=call_token)
        return self._regrant(now)

    def _regrant(self, now: int) -> list[str]:
        granted_tokens: list[str] = []
        self.queue.sort(key=lambda e: -e.priority)
        remaining: list[QueueEntry] = []
        for entry in self.queue:
            if all(self.ownership[r] is FREE for r in entry.wanted):
                for r in entry.wanted:
                    self.ownership[r] = entry.op_id
                self._held_since[entry.op_id] = Ownership(entry.op_id, now)
                granted_tokens.append(entry.call_token)
                self.log.record(now, "interlock", "grant", subject=entry.op_id,
                                token=entry.call_token, resources=list(entry.wanted),
                                queued_ms=now - entry.enqueued_ts)
                if entry.grant_cb is not None:
                    entry.grant_cb(entry.call_token)
            else:
                remaining.append(entry)
        self.queue = remaining
        return granted_tokens

    def fault(self, op_id: str, call_token: str = "", cause: str = "") -> list[str]:
        """Lock out every resource op_id owns and dispatch each one's safe-state
        group. The queue is not re-evaluated: nothing was freed. Returns the
        lockout group tokens."""
        now = self.clock.now_ms()
        owned = [r for r in self.resources if self.ownership[r] == op_id]
        for r in owned:
            self.ownership[r] = FAULT
        self._held_since.pop(op_id, None)
        self.log.record(now, "interlock", "fault", subject=op_id, token=call_token,
                        resources=owned, cause=cause)
        group_tokens: list[str] = []
        for r in owned:
            token = self.lockout_dispatch(r, call_token)
            group_tokens.append(token)
            self.log.record(self.clock.now_ms(), "interlock", "lockout_dispatched",
                            subject=r, token=token, fault_ref=call_token)
        self.notify({"layer": "interlock", "event": "fault", "op_id": op_id,
                     "resources": owned, "cause": cause, "token": call_token})
        return group_tokens

    def cancel(self, op_id: str) -> bool:
        """Withdraw a queued acquire whose caller died before its grant."""
        for i, entry in enumerate(self.queue):
            if entry.op_id == op_id:
                del self.queue[i]
                self.log.record(self.clock.now_ms(), "interlock", "acquire_cancelled",
                                subject=op_id, token=entry.call_token)
                return True
        return False

    def clear_fault(self, resource: str) -> list[str]:
        if self.ownership.get(resource) != FAULT:
            raise ResourceNotFaulted(resource)
        now = self.clock.now_ms()
        self.ownership[resource] = FREE
        self.log.record(now, "interlock", "fault_cleared", subject=resource)
        return self._regrant(now)

    # -- watchdog -------------------------------------------------------------

    def watchdog(self) -> None:
        now = self.clock.now_ms()
        for entry in self.queue:
            if not entry.warned and now - entry.enqueued_ts >= self.watchdog_cfg.queue_warn_ms:
                entry.warned = True
                diag = {"layer": "interlock", "event": "queue_wait_warning",
                        "op_id": entry.op_id, "queued_ms": now - entry.enqueued_ts}
                self.log.record(now, "interlock", "queue_wait_warning",
                                subject=entry.op_id, token=entry.call_token,
                                queued_ms=now - entry.enqueued_ts)
                self.notify(diag)
        for op_id in sorted(self._held_since):
            held = self._held_since[op_id]
            if not held.warned and now - held.since_ts >= self.watchdog_cfg.hold_warn_ms:
                held.warned = True
                diag = {"layer": "interlock", "event": "hold_warning",
                        "op_id": op_id, "held_ms": now - held.since_ts}
                self.log.record(now, "interlock", "hold_warning", subject=op_id,
                                held_ms=now - held.since_ts)
                self.notify(diag)

    # -- queries ---------------------------------------------------------------

    def owner(self, resource: str) -> str | None:
        return self.ownership[resource]

    def owned_by(self, op_id: str) -> list[str]:
        return [r for r in self.resources if self.ownership[r] == op_id]

    def queued_ops(self) -> list[str]:
        return [e.op_id for e in self.queue]

    def snapshot(self) -> dict:
        """Ownership plus queue normalized by priority, for trace comparison."""
        return {
            "O": dict(self.ownership),
            "Q": sorted(((e.op_id, tuple(e.wanted), e.priority) for e in self.queue),
                        key=lambda t: -t[2]),
        }
