"""Simulation event log and its CSV export.

CSV columns, in order: time,event,entity,key_epoch,lat,lon,source,flags.
Empty cells mean "not applicable". ``source`` is only set on ``owner``
rows (cloud/local/none); ``flags`` is a space-separated list of tokens.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, TextIO

from ..timeutil import format_time

CSV_COLUMNS = ("time", "event", "entity", "key_epoch", "lat", "lon", "source", "flags")
# high-volume per-frame events, left out of CSV exports unless asked for
FRAME_EVENTS = frozenset({"advertise", "capture", "ingest", "emit"})


@dataclass(frozen=True)
class Event:
    time: float
    event: str
    entity: str
    key_epoch: int | None = None
    lat: float | None = None
    lon: float | None = None
    source: str = ""
    flags: str = ""
    # in-memory extras (e.g. raw advertisement bytes); never exported
    data: Any = None

    def row(self) -> list[str]:
        return [
            format_time(self.time),
            self.event,
            self.entity,
            "" if self.key_epoch is None else str(self.key_epoch),
            "" if self.lat is None else f"{self.lat:.7f}",
            "" if self.lon is None else f"{self.lon:.7f}",
            self.source,
            self.flags,
        ]


class EventLog:
    def __init__(self):
        self.events: list[Event] = []

    def append(self, event: Event) -> None:
        self.events.append(event)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def where(self, event: str | None = None, entity: str | None = None) -> list[Event]:
        return [
            e for e in self.events
            if (event is None or e.event == event) and (entity is None or e.entity == entity)
        ]

    def write_csv(self, out: TextIO, all_events: bool = False, kinds: Iterable[str] | None = None) -> int:
        wanted = set(kinds) if kinds is not None else None
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        count = 0
        for event in self.events:
            if wanted is not None:
                if event.event not in wanted:
                    continue
            elif not all_events and event.event in FRAME_EVENTS:
                continue
            writer.writerow(event.row())
            count += 1
        return count

    def to_csv(self, all_events: bool = False, kinds: Iterable[str] | None = None) -> str:
        buf = io.StringIO()
        self.write_csv(buf, all_events, kinds)
        return buf.getvalue()

    def save_csv(self, path: str | Path, all_events: bool = False) -> int:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            return self.write_csv(fh, all_events)


def read_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))
