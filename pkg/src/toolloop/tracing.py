"""Ordered event trace shared by the retriever, solver, and reflection loop.

One record per event, line-delimited JSON on disk:
  {seq, agent_id, kind, event, payload}

Events: created, model_call, function_call, pool_add, finish, stop, resume,
reflect, round, node, judge, result. `seq` is a run-global counter, so the
file replays the run in order; deterministic mode makes it reproducible
byte for byte.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    agent_id: str
    kind: str
    event: str
    payload: dict[str, Any] = field(default_factory=dict)

    def to_payload(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "agent_id": self.agent_id,
            "kind": self.kind,
            "event": self.event,
            "payload": self.payload,
        }


class Trace:
    """Append-only, thread-safe event log."""

    def __init__(self) -> None:
        self._events: list[TraceEvent] = []
        self._lock = threading.Lock()

    def record(
        self, agent_id: str, kind: str, event: str, **payload: Any
    ) -> TraceEvent:
        with self._lock:
            evt = TraceEvent(len(self._events), agent_id, kind, event, payload)
            self._events.append(evt)
        return evt

    @property
    def events(self) -> list[TraceEvent]:
        with self._lock:
            return list(self._events)

    def filter(self, event: str | None = None, kind: str | None = None) -> list[TraceEvent]:
        return [
            e
            for e in self.events
            if (event is None or e.event == event)
            and (kind is None or e.kind == kind)
        ]

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event.to_payload(), sort_keys=True))
                fh.write("\n")

    @classmethod
    def read_jsonl(cls, path: str) -> list[TraceEvent]:
        events = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                doc = json.loads(line)
                events.append(
                    TraceEvent(
                        seq=doc["seq"],
                        agent_id=doc["agent_id"],
                        kind=doc["kind"],
                        event=doc["event"],
                        payload=doc.get("payload", {}),
                    )
                )
        return events


def count_events(events: Iterable[TraceEvent], event: str, kind: str | None = None) -> int:
    return sum(
        1 for e in events if e.event == event and (kind is None or e.kind == kind)
    )
