"""On-disk data model: effort-belt signals, event annotations and reports.

Signal files are a single UTF-8 JSON header line followed by ``n_samples``
little-endian float32 values.  Annotations (expert labels and predictions)
are NDJSON, one ``{"start_s", "dur_s", "class"}`` object per line.  Reports
are plain JSON documents.

Label timelines are 1 Hz integer arrays of :class:`EventClass` codes; second
``i`` carries the class of whichever event covers the midpoint ``i + 0.5``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (
    EventOutOfBounds,
    InvalidEventClass,
    MalformedHeader,
    NonPositiveSampleRate,
    OverlappingEvents,
    TruncatedPayload,
)

HEADER_KEYS = ("record_id", "sample_rate_hz", "n_samples", "sleep_hours")
TIMELINE_HZ = 1


class EventClass(IntEnum):
    NO_EVENT = 0
    OBSTRUCTIVE = 1  # obstructive or mixed apnea
    CENTRAL = 2
    RERA = 3
    HYPOPNEA = 4


# scorer vocabularies fold mixed apneas into the obstructive code
CLASS_NAMES = {
    "obstructive": EventClass.OBSTRUCTIVE,
    "mixed": EventClass.OBSTRUCTIVE,
    "central": EventClass.CENTRAL,
    "rera": EventClass.RERA,
    "hypopnea": EventClass.HYPOPNEA,
}


def parse_event_class(value) -> EventClass:
    """Coerce an integer code or a scorer name to an event class.

    ``NO_EVENT`` is rejected: an annotation always describes an event.
    """
    if isinstance(value, str):
        try:
            return CLASS_NAMES[value.strip().lower()]
        except KeyError:
            raise InvalidEventClass(f"unknown event class name {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InvalidEventClass(f"event class must be an integer code, got {value!r}")
    if not 1 <= int(value) <= 4:
        raise InvalidEventClass(f"event class code {value} outside 1..4")
    return EventClass(int(value))


@dataclass
class SignalRecord:
    record_id: str
    sample_rate_hz: float
    samples: np.ndarray
    sleep_hours: float

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise NonPositiveSampleRate(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise MalformedHeader("samples must be a nonempty 1-D sequence")
        if not self.sleep_hours >= 0:
            raise ValueError(f"sleep_hours must be nonnegative, got {self.sleep_hours}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class AnnotationEvent:
    start_s: float
    duration_s: float
    event_class: EventClass

    def __post_init__(self):
        if not self.start_s >= 0:
            raise EventOutOfBounds(f"event starts before the record: {self.start_s}")
        if not self.duration_s > 0:
            raise ValueError(f"event duration must be positive, got {self.duration_s}")
        object.__setattr__(self, "event_class", parse_event_class(self.event_class))

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    def to_json(self) -> dict:
        return {"start_s": self.start_s, "dur_s": self.duration_s, "class": int(self.event_class)}


# --- signal files -----------------------------------------------------------

def save_record(record: SignalRecord, path) -> None:
    header = {
        "record_id": record.record_id,
        "sample_rate_hz": record.sample_rate_hz,
        "n_samples": int(record.samples.size),
        "sleep_hours": record.sleep_hours,
    }
    payload = np.ascontiguousarray(record.samples, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def load_record(path) -> SignalRecord:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise MalformedHeader(f"{path}: no header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: header is not JSON ({exc})") from None
    if not isinstance(header, dict) or any(k not in header for k in HEADER_KEYS):
        raise MalformedHeader(f"{path}: header must contain {', '.join(HEADER_KEYS)}")
    n = header["n_samples"]
    if isinstance(n, bool) or not isinstance(n, int) or n <= 0:
        raise MalformedHeader(f"{path}: n_samples must be a positive integer")
    rate = header["sample_rate_hz"]
    if isinstance(rate, bool) or not isinstance(rate, (int, float)):
        raise MalformedHeader(f"{path}: sample_rate_hz must be a number")
    if rate <= 0:
        raise NonPositiveSampleRate(f"{path}: sample_rate_hz={rate}")

    payload = raw[newline + 1:]
    if len(payload) < 4 * n:
        raise TruncatedPayload(f"{path}: header declares {n} samples, found {len(payload) // 4}")
    if len(payload) > 4 * n:
        raise MalformedHeader(f"{path}: {len(payload) - 4 * n} trailing bytes after payload")
    samples = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return SignalRecord(
        record_id=str(header["record_id"]),
        sample_rate_hz=rate,
        samples=samples,
        sleep_hours=header["sleep_hours"],
    )


# --- annotation files -------------------------------------------------------

def check_events(events, duration_s=None, allow_overlap=False):
    """Validate ordering, bounds and (optionally) disjointness of an event list."""
    tol = 1e-9
    prev = None
    for ev in events:
        if duration_s is not None and ev.end_s > duration_s + tol:
            raise EventOutOfBounds(
                f"event [{ev.start_s}, {ev.end_s}) exceeds record duration {duration_s}")
        if prev is not None:
            if ev.start_s < prev.start_s:
                raise ValueError("events must be sorted by start_s")
            if not allow_overlap and ev.start_s < prev.end_s - tol:
                raise OverlappingEvents(
                    f"events at {prev.start_s} s and {ev.start_s} s overlap")
        prev = ev


def save_events(events, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_json()) + "\n")


def load_events(path, duration_s=None, allow_overlap=False) -> list[AnnotationEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                events.append(AnnotationEvent(obj["start_s"], obj["dur_s"], obj["class"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MalformedHeader(f"{path}:{lineno}: bad annotation line ({exc})") from None
    check_events(events, duration_s, allow_overlap)
    return events


# --- reports ----------------------------------------------------------------

def save_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --- timelines --------------------------------------------------------------

def events_to_timeline(events, duration_s) -> np.ndarray:
    """Rasterize events onto the 1 Hz grid.

    Returns an int8 array of length ``floor(duration_s)``.  Later events
    overwrite earlier ones where they overlap.
    """
    n = int(math.floor(duration_s))
    timeline = np.zeros(n, dtype=np.int8)
    for ev in events:
        if ev.start_s < 0 or ev.end_s > duration_s + 1e-9:
            raise EventOutOfBounds(
                f"event [{ev.start_s}, {ev.end_s}) outside record of {duration_s} s")
        # seconds i with start <= i + 0.5 < end
        lo = max(0, math.ceil(ev.start_s - 0.5))
        hi = min(n, math.ceil(ev.end_s - 0.5))
        if hi > lo:
            timeline[lo:hi] = int(ev.event_class)
    return timeline


def timeline_to_events(timeline) -> list[AnnotationEvent]:
    """Run-length encode a 1 Hz timeline into events (NoEvent runs dropped)."""
    timeline = np.asarray(timeline)
    if timeline.size == 0:
        return []
    change = np.flatnonzero(np.diff(timeline)) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [timeline.size]))
    return [
        AnnotationEvent(float(s), float(e - s), EventClass(int(timeline[s])))
        for s, e in zip(starts, ends)
        if timeline[s] != EventClass.NO_EVENT
    ]
