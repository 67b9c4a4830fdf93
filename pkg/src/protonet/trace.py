"""Structured protocol trace: one event per spawn, handshake, sweep step,
route decision, execution interval, etc. Property tests read it back.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field


@dataclass(frozen=True, slots=True)
class TraceEvent:
    t_ns: int
    node: str
    event: str
    data: dict = field(default_factory=dict)

    def render(self) -> str:
        fields = " ".join(f"{k}={self.data[k]}" for k in self.data)
        return f"{self.t_ns} {self.node} {self.event} {fields}".rstrip()


class TraceLog:
    """Append-only, thread-safe event log with monotonic timestamps."""

    def __init__(self) -> None:
        self._events: list[TraceEvent] = []
        self._lock = threading.Lock()

    def record(self, node: str, event: str, **data) -> None:
        ev = TraceEvent(time.monotonic_ns(), node, event, data)
        with self._lock:
            self._events.append(ev)

    def events(self, event: str | None = None, node: str | None = None) -> list[TraceEvent]:
        with self._lock:
            snapshot = list(self._events)
        return [
            ev
            for ev in snapshot
            if (event is None or ev.event == event) and (node is None or ev.node == node)
        ]

    def render_lines(self) -> list[str]:
        return [ev.render() for ev in self.events()]

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)
