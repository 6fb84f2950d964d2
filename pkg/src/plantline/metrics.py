"""Timing analysis over the event log.

Three report families mirror the evaluation hierarchy: message time of
flight per device, command execution metrics (issuance-to-motion,
completion, fault lockout), and per-operation runtimes. Command metrics
are matched by correlation token; dispatches that never closed are listed
as orphans rather than silently dropped.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Iterable

from .events import EventRecord

COMMAND_BIN_MS = 100
RUNTIME_BIN_MS = 1000


@dataclass
class Distribution:
    name: str
    samples: list[float] = field(default_factory=list)
    bin_ms: int = COMMAND_BIN_MS

    @property
    def count(self) -> int:
        return len(self.samples)

    @property
    def median(self) -> float:
        return statistics.median(self.samples) if self.samples else float("nan")

    @property
    def mean(self) -> float:
        return statistics.fmean(self.samples) if self.samples else float("nan")

    def percentile(self, p: float) -> float:
        if not self.samples:
            return float("nan")
        data = sorted(self.samples)
        if len(data) == 1:
            return data[0]
        k = (len(data) - 1) * (p / 100.0)
        lo = int(k)
        hi = min(lo + 1, len(data) - 1)
        return data[lo] + (data[hi] - data[lo]) * (k - lo)

    def histogram(self) -> list[tuple[int, int]]:
        """(bin_start_ms, count) for non-empty fixed-width bins."""
        counts: dict[int, int] = {}
        for v in self.samples:
            b = int(v // self.bin_ms) * self.bin_ms
            counts[b] = counts.get(b, 0) + 1
        return sorted(counts.items())

    def mass_within(self, lo_ms: float, hi_ms: float) -> float:
        if not self.samples:
            return 0.0
        inside = sum(1 for v in self.samples if lo_ms <= v <= hi_ms)
        return inside / len(self.samples)

    def summary(self) -> dict:
        return {
            "count": self.count,
            "median_ms": round(self.median, 1) if self.samples else None,
            "mean_ms": round(self.mean, 1) if self.samples else None,
            "p95_ms": round(self.percentile(95), 1) if self.samples else None,
            "min_ms": round(min(self.samples), 1) if self.samples else None,
            "max_ms": round(max(self.samples), 1) if self.samples else None,
        }


def compute_tof(records: Iterable[EventRecord]) -> dict[str, Distribution]:
    """Per-device time-of-flight distribution from `state` records.

    A device publishing several topics in one sampling interval contributes
    the mean of those deltas as a single measurement for that interval.
    """
    per_interval: dict[tuple[str, int], list[float]] = {}
    for rec in records:
        if rec.layer != "bus" or rec.kind != "state":
            continue
        src = rec.attrs.get("source_ts")
        if src is None:
            continue
        interval = int(src) // 1000
        per_interval.setdefault((rec.subject, interval), []).append(rec.ts - int(src))
    out: dict[str, Distribution] = {}
    for (device, _), deltas in sorted(per_interval.items()):
        out.setdefault(device, Distribution(f"tof[{device}]")).samples.append(
            sum(deltas) / len(deltas))
    return out


def tof_overall(records: Iterable[EventRecord]) -> Distribution:
    merged = Distribution("tof")
    for dist in compute_tof(records).values():
        merged.samples.extend(dist.samples)
    return merged


@dataclass
class CommandMetrics:
    issuance_to_motion: Distribution
    completion: Distribution
    fault_lockout: Distribution
    orphans: list[str]


def compute_command_metrics(records: Iterable[EventRecord], *,
                            actuator_kind: str | None = None) -> CommandMetrics:
    """Match dispatch/moving/stopped actuator events and fault/lockout pairs
    by token. `actuator_kind` restricts motion/completion stats to one
    actuator type (e.g. only valves)."""
    records = list(records)
    dispatch: dict[tuple[str, str], EventRecord] = {}
    first_motion: dict[tuple[str, str], int] = {}
    stopped: dict[tuple[str, str], int] = {}
    for rec in records:
        if rec.layer != "actuator":
            continue
        key = (rec.subject, rec.token)
        if rec.kind == "dispatch" and key not in dispatch:
            dispatch[key] = rec
        elif rec.kind == "moving" and key not in first_motion:
            first_motion[key] = rec.ts
        elif rec.kind == "stopped" and key not in stopped:
            stopped[key] = rec.ts

    motion = Distribution("issuance_to_motion")
    completion = Distribution("completion")
    orphans: list[str] = []
    for key, d in dispatch.items():
        if actuator_kind is not None and d.attrs.get("actuator_kind") != actuator_kind:
            continue
        if key in first_motion:
            motion.samples.append(first_motion[key] - d.ts)
        if key in stopped:
            completion.samples.append(stopped[key] - d.ts)
        else:
            orphans.append(d.token)

    lockout = Distribution("fault_lockout")
    lockout_done = {rec.token: rec.ts for rec in records
                    if rec.layer == "group" and rec.kind == "group_complete"}
    lockout_groups: dict[str, list[str]] = {}
    fault_ts: dict[str, int] = {}
    for rec in records:
        if rec.layer == "interlock" and rec.kind == "fault":
            fault_ts[rec.token] = rec.ts
        elif rec.layer == "interlock" and rec.kind == "lockout_dispatched":
            lockout_groups.setdefault(rec.attrs.get("fault_ref", ""), []).append(rec.token)
    for fault_ref, groups in lockout_groups.items():
        if fault_ref not in fault_ts:
            continue
        ends = [lockout_done[g] for g in groups if g in lockout_done]
        if len(ends) == len(groups):  # isolation complete only when every group closed
            lockout.samples.append(max(ends) - fault_ts[fault_ref])
    return CommandMetrics(motion, completion, lockout, sorted(orphans))


@dataclass
class RuntimeReport:
    per_op: dict[str, Distribution]
    faulted: list[str]   # run tokens that ended in a fault
    unclosed: list[str]  # run tokens granted but never released


def compute_op_runtime(records: Iterable[EventRecord]) -> RuntimeReport:
    grants: dict[str, EventRecord] = {}
    per_op: dict[str, Distribution] = {}
    faulted: list[str] = []
    for rec in records:
        if rec.layer != "operation":
            continue
        if rec.kind == "grant":
            grants[rec.token] = rec
        elif rec.kind == "release" and rec.token in grants:
            start = grants.pop(rec.token)
            dist = per_op.setdefault(
                start.subject, Distribution(f"runtime[{start.subject}]", bin_ms=RUNTIME_BIN_MS))
            dist.samples.append(rec.ts - start.ts)
        elif rec.kind == "faulted":
            faulted.append(rec.token)
            grants.pop(rec.token, None)
    return RuntimeReport(per_op=per_op, faulted=sorted(faulted),
                         unclosed=sorted(grants))


def ascii_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def fmt(cells: list[str]) -> str:
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines)


def render_distribution(dist: Distribution, *, bars: bool = True) -> str:
    s = dist.summary()
    head = (f"{dist.name}: n={s['count']} median={s['median_ms']}ms "
            f"mean={s['mean_ms']}ms p95={s['p95_ms']}ms "
            f"range=[{s['min_ms']}, {s['max_ms']}]ms")
    if not bars or not dist.samples:
        return head
    hist = dist.histogram()
    peak = max(c for _, c in hist)
    lines = [head]
    for lo, count in hist:
        bar = "#" * max(1, round(40 * count / peak))
        lines.append(f"  {lo/1000.0:8.1f}s  {count:6d}  {bar}")
    return "\n".join(lines)
