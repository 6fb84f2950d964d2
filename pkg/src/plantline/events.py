"""Append-only structured event log, one JSON document per line.

Every layer reports what it did here; the timing reports in `metrics` are
computed purely from these records, never from live state. Records are
buffered in memory and mirrored to a file when a path is configured, so a
full disk degrades to a warning instead of stalling control flow.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

logger = logging.getLogger(__name__)

LAYERS = ("bus", "actuator", "group", "interlock", "operation", "routine", "sim", "harness")


class MalformedRecord(ValueError):
    pass


@dataclass(slots=True)
class EventRecord:
    ts: int                 # epoch ms
    layer: str              # one of LAYERS
    kind: str               # event name, e.g. "dispatch", "grant"
    subject: str = ""       # actuator/op/routine/device id
    token: str = ""         # correlation token
    attrs: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"ts": self.ts, "layer": self.layer, "kind": self.kind}
        if self.subject:
            doc["subject"] = self.subject
        if self.token:
            doc["token"] = self.token
        if self.attrs:
            doc["attrs"] = self.attrs
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "EventRecord":
        doc = json.loads(line)
        return cls(ts=int(doc["ts"]), layer=doc["layer"], kind=doc["kind"],
                   subject=doc.get("subject", ""), token=doc.get("token", ""),
                   attrs=doc.get("attrs", {}))


@dataclass(slots=True)
class LatencySample:
    metric: str    # tof | issuance_to_motion | completion | fault_lockout | op_runtime
    subject: str
    value_ms: float
    ts: int

    def __post_init__(self) -> None:
        if self.value_ms < 0:
            raise MalformedRecord(f"negative latency sample: {self!r}")


class EventLog:
    """Single-writer append log; producers never block on disk."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.records: list[EventRecord] = []
        self._path = Path(path) if path else None
        self._fh = None
        self._disk_failed = False
        if self._path:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self._path, "w", encoding="utf-8")

    def record(self, ts: int, layer: str, kind: str, subject: str = "",
               token: str = "", **attrs: Any) -> EventRecord:
        if layer not in LAYERS:
            raise MalformedRecord(f"unknown layer {layer!r}")
        if not kind or ts < 0:
            raise MalformedRecord(f"bad event {layer}/{kind!r} ts={ts}")
        rec = EventRecord(ts=int(ts), layer=layer, kind=kind, subject=subject,
                          token=token, attrs=attrs)
        self.records.append(rec)
        if self._fh is not None and not self._disk_failed:
            try:
                self._fh.write(rec.to_json() + "\n")
            except OSError as exc:
                self._disk_failed = True
                logger.warning("event log sink failed, continuing in memory: %s", exc)
        return rec

    def iter(self, layer: str | None = None, kind: str | None = None) -> Iterator[EventRecord]:
        for rec in self.records:
            if layer is not None and rec.layer != layer:
                continue
            if kind is not None and rec.kind != kind:
                continue
            yield rec

    def flush(self) -> None:
        if self._fh is not None and not self._disk_failed:
            try:
                self._fh.flush()
            except OSError:
                self._disk_failed = True

    def close(self) -> None:
        if self._fh is not None:
            self.flush()
            try:
                self._fh.close()
            except OSError:
                pass
            self._fh = None

    @staticmethod
    def load(path: str | Path) -> list[EventRecord]:
        records = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(EventRecord.from_json(line))
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise MalformedRecord(f"{path}:{n}: {exc}") from exc
        return records


def normalized_dump(records: Iterable[EventRecord]) -> list[str]:
    """Serialized records with timestamps rebased to the first one.

    Used by the determinism check: two runs of the same scenario must be
    byte-identical after removing the wall-time origin.
    """
    records = list(records)
    if not records:
        return []
    origin = min(r.ts for r in records)

    def shift(rec: EventRecord) -> str:
        attrs = dict(rec.attrs)
        for key in ("source_ts", "recv_ts", "detected_ts"):
            if key in attrs and isinstance(attrs[key], (int, float)):
                attrs[key] = attrs[key] - origin
        moved = EventRecord(ts=rec.ts - origin, layer=rec.layer, kind=rec.kind,
                            subject=rec.subject, token=rec.token, attrs=attrs)
        return moved.to_json()

    return [shift(r) for r in records]
