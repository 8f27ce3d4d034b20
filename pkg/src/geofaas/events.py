"""Structured event log: one line per event.

Line format (tab separated)::

    <t_ms>  <kind>  <correlation_id or ->  <node>  [key=value ...]

Timestamps come from the running event loop's clock, so under the
simulated network they are virtual milliseconds since boot.
"""

from __future__ import annotations

import asyncio
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, TextIO

_WS = re.compile(r"\s+")


def _clean(value) -> str:
    if isinstance(value, float):
        return f"{value:.3f}"
    return _WS.sub("_", str(value)) or "-"


@dataclass(frozen=True)
class Event:
    t_ms: float
    kind: str
    corr: Optional[str]
    node: str
    fields: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.fields.get(key, default)


class EventLog:
    def __init__(self, clock: Optional[Callable[[], float]] = None, stream: Optional[TextIO] = None, keep: bool = True):
        self._clock = clock
        self._stream = stream
        self._keep = keep
        self.lines: list[str] = []

    def now_ms(self) -> float:
        clock = self._clock or asyncio.get_running_loop().time
        return clock() * 1000.0

    def emit(self, kind: str, node: str, corr: Optional[str] = None, **fields) -> None:
        parts = [f"{self.now_ms():.3f}", kind, corr or "-", node]
        parts.extend(f"{k}={_clean(v)}" for k, v in fields.items())
        line = "\t".join(parts)
        if self._keep:
            self.lines.append(line)
        if self._stream is not None:
            self._stream.write(line + "\n")

    def events(self) -> list[Event]:
        return [parse_line(line) for line in self.lines]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)


def parse_line(line: str) -> Event:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 4:
        raise ValueError(f"malformed event line {line!r}")
    t, kind, corr, node = parts[:4]
    fields = {}
    for item in parts[4:]:
        key, _, value = item.partition("=")
        fields[key] = value
    return Event(float(t), kind, None if corr == "-" else corr, node, fields)


def parse_log(text: str) -> list[Event]:
    return [parse_line(line) for line in text.splitlines() if line.strip()]


class NullLog(EventLog):
    def __init__(self):
        super().__init__(clock=lambda: 0.0, keep=False)

    def emit(self, kind, node, corr=None, **fields):
        pass
