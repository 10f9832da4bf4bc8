"""Append-only event trace with logical ticks.

Traces never carry wall-clock time, so two runs with the same seed serialize
to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from .errors import TraceParseError

HOST_VISIBLE = "host_visible"
PRIVATE = "private"

# 0: protocol events only, 1: also every staging write, 2: staging writes carry a digest
LEVELS = {"quiet": 0, "normal": 1, "debug": 2}


def trace_level_from_env() -> int:
    raw = os.environ.get("GPUCC_SIM_TRACE_LEVEL", "normal").strip().lower()
    if raw.isdigit():
        return max(0, min(2, int(raw)))
    return LEVELS.get(raw, 1)


@dataclass
class TraceEvent:
    t: int
    actor: str
    event: str
    visibility: str = PRIVATE
    meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = {"t": self.t, "actor": self.actor, "event": self.event, "visibility": self.visibility}
        d.update(self.meta)
        return d


class Trace:
    def __init__(self, level: int | None = None):
        self.level = trace_level_from_env() if level is None else level
        self._events: list[TraceEvent] = []
        self._tick = 0

    def emit(self, actor: str, event: str, visibility: str = PRIVATE, **meta: Any) -> TraceEvent:
        ev = TraceEvent(self._tick, actor, event, visibility, meta)
        self._tick += 1
        self._events.append(ev)
        return ev

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self._events)

    def events(self, *names: str) -> list[TraceEvent]:
        if not names:
            return list(self._events)
        wanted = set(names)
        return [e for e in self._events if e.event in wanted]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":")) + "\n" for e in self._events)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def read_trace(path: str | Path) -> list[dict[str, Any]]:
    """Parse a JSONL trace, naming the 1-based line of the first bad record."""
    events = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(line_no, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict) or "event" not in obj or "t" not in obj:
                raise TraceParseError(line_no, "record lacks 't' or 'event'")
            events.append(obj)
    return events
