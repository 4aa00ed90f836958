"""Raw device logs: parsing, serialization, and gesture segmentation.

JSONL format, one record per line. The first record must be the header::

    {"kind": "meta", "screen_w": 768, "screen_h": 1280, "version": 1, "user": "u00"}
    {"t": 0, "kind": "touch", "x": 10.0, "y": 20.0, "pressure": 0.4, "size": 0.2, "phase": "down", "session": 1}
    {"t": 4, "kind": "accel", "vx": 0.1, "vy": 9.8, "vz": 0.3}
    {"t": 4, "kind": "gyro", "vx": 0.0, "vy": 0.01, "vz": -0.02}

``user`` and ``session`` are optional. The CSV variant uses the fixed
column order in ``CSV_COLUMNS`` with a header row; the meta row fills only
``kind, screen_w, screen_h, version, user`` and every other row leaves the
meta columns empty.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable

from .errors import ParseError

LOG_VERSION = 1
PHASES = ("down", "move", "up")
INERTIAL_KINDS = {"accel": "vibration", "gyro": "rotation"}
CHANNEL_KINDS = {v: k for k, v in INERTIAL_KINDS.items()}
CSV_COLUMNS = (
    "t", "kind", "x", "y", "pressure", "size", "phase", "session",
    "vx", "vy", "vz", "screen_w", "screen_h", "version", "user",
)


@dataclass(frozen=True)
class TouchSample:
    t: int
    x: float
    y: float
    pressure: float
    size: float
    phase: str
    session: int = 0


@dataclass(frozen=True)
class InertialSample:
    t: int
    channel: str  # "vibration" or "rotation"
    v: tuple[float, float, float]


@dataclass(frozen=True)
class RawEventLog:
    screen_width: int
    screen_height: int
    touch: tuple[TouchSample, ...] = ()
    inertial: tuple[InertialSample, ...] = ()
    user: str | None = None

    def inertial_channel(self, channel: str) -> list[InertialSample]:
        return [s for s in self.inertial if s.channel == channel]

    def without_inertial(self) -> "RawEventLog":
        return RawEventLog(self.screen_width, self.screen_height, self.touch, (), self.user)


@dataclass(frozen=True)
class GestureSegment:
    touch: tuple[TouchSample, ...]
    vibration: tuple[InertialSample, ...]
    rotation: tuple[InertialSample, ...]
    screen_width: int
    screen_height: int
    label: str | None = None
    session: int = 0
    index: int = 0

    @property
    def t_down(self) -> int:
        return self.touch[0].t

    @property
    def t_up(self) -> int:
        return self.touch[-1].t


@dataclass
class SegmentReport:
    """Counts of input that segmentation had to discard."""

    orphan_ups: int = 0
    unmatched_downs: int = 0
    multitouch_dropped: int = 0
    stray_moves: int = 0
    segments: int = 0


# -- parsing ---------------------------------------------------------------


def _num(rec: dict, key: str, line: int, kind=float):
    if key not in rec:
        raise ParseError(f"missing field {key!r}", line)
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ParseError(f"field {key!r} must be numeric, got {val!r}", line)
    if kind is int:
        if isinstance(val, float):
            if not val.is_integer():
                raise ParseError(f"field {key!r} must be an integer", line)
            val = int(val)
        return val
    return float(val)


def _build_meta(rec: dict, line: int) -> tuple[int, int, str | None]:
    w = _num(rec, "screen_w", line, int)
    h = _num(rec, "screen_h", line, int)
    if w <= 0 or h <= 0:
        raise ParseError("screen dimensions must be positive", line)
    version = rec.get("version", LOG_VERSION)
    if version != LOG_VERSION:
        raise ParseError(f"unsupported log version {version!r}", line)
    user = rec.get("user")
    return w, h, None if user is None else str(user)


def _build_sample(rec: dict, line: int, w: int, h: int):
    kind = rec.get("kind")
    t = _num(rec, "t", line, int)
    if t < 0:
        raise ParseError("timestamp must be non-negative", line)
    if kind == "touch":
        phase = rec.get("phase")
        if phase not in PHASES:
            raise ParseError(f"unknown touch phase {phase!r}", line)
        x, y = _num(rec, "x", line), _num(rec, "y", line)
        p, s = _num(rec, "pressure", line), _num(rec, "size", line)
        if not (0.0 <= p <= 1.0 and 0.0 <= s <= 1.0):
            raise ParseError("pressure and size must lie in [0, 1]", line)
        if not (0.0 <= x <= w and 0.0 <= y <= h):
            raise ParseError(f"position ({x}, {y}) outside screen {w}x{h}", line)
        session = _num(rec, "session", line, int) if rec.get("session") is not None else 0
        return TouchSample(t, x, y, p, s, phase, session)
    if kind in INERTIAL_KINDS:
        v = (_num(rec, "vx", line), _num(rec, "vy", line), _num(rec, "vz", line))
        return InertialSample(t, INERTIAL_KINDS[kind], v)
    raise ParseError(f"unknown record kind {kind!r}", line)


def _iter_jsonl(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc.msg}", lineno) from exc
        if not isinstance(rec, dict):
            raise ParseError("record must be a JSON object", lineno)
        yield lineno, rec


def _iter_csv(text: str):
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return
    if tuple(reader.fieldnames) != CSV_COLUMNS:
        raise ParseError(f"CSV header must be {','.join(CSV_COLUMNS)}", 1)
    for row in reader:
        lineno = reader.line_num
        rec = {}
        for key, val in row.items():
            if val is None or val == "":
                continue
            if key in ("kind", "phase", "user"):
                rec[key] = val
            else:
                try:
                    rec[key] = int(val) if key in ("t", "session", "screen_w", "screen_h", "version") else float(val)
                except ValueError as exc:
                    raise ParseError(f"field {key!r} not numeric: {val!r}", lineno) from exc
        yield lineno, rec


def parse_log(data: bytes | str, format: str = "jsonl", reorder_ms: float = 10.0) -> RawEventLog:
    """Parse a raw event log.

    Records may arrive out of order by at most ``reorder_ms`` relative to the
    latest timestamp seen in the same stream (touch or inertial); the result
    is stably sorted by time.

    Raises:
        ParseError: malformed record, unknown kind, missing header, or a
            timestamp regression beyond the reorder buffer.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    if format == "jsonl":
        records = _iter_jsonl(text)
    elif format == "csv":
        records = _iter_csv(text)
    else:
        raise ParseError(f"unknown log format {format!r}")

    meta = None
    touch: list[TouchSample] = []
    inertial: list[InertialSample] = []
    latest = {"touch": -1, "inertial": -1}
    for lineno, rec in records:
        if rec.get("kind") == "meta":
            if meta is not None:
                raise ParseError("duplicate meta header", lineno)
            meta = _build_meta(rec, lineno)
            continue
        if meta is None:
            raise ParseError("meta header must precede all samples", lineno)
        sample = _build_sample(rec, lineno, meta[0], meta[1])
        stream = "touch" if isinstance(sample, TouchSample) else "inertial"
        if sample.t < latest[stream] - reorder_ms:
            raise ParseError(
                f"timestamp {sample.t} precedes {latest[stream]} by more than the "
                f"{reorder_ms} ms reorder buffer", lineno,
            )
        latest[stream] = max(latest[stream], sample.t)
        (touch if stream == "touch" else inertial).append(sample)

    if meta is None:
        # an empty stream is a valid, empty log
        meta = (1, 1, None)
    touch.sort(key=lambda s: s.t)
    inertial.sort(key=lambda s: s.t)
    return RawEventLog(meta[0], meta[1], tuple(touch), tuple(inertial), meta[2])


def _touch_record(s: TouchSample) -> dict:
    return {"t": s.t, "kind": "touch", "x": s.x, "y": s.y, "pressure": s.pressure,
            "size": s.size, "phase": s.phase, "session": s.session}


def _inertial_record(s: InertialSample) -> dict:
    return {"t": s.t, "kind": CHANNEL_KINDS[s.channel], "vx": s.v[0], "vy": s.v[1], "vz": s.v[2]}


def _meta_record(log: RawEventLog) -> dict:
    rec = {"kind": "meta", "screen_w": log.screen_width, "screen_h": log.screen_height,
           "version": LOG_VERSION}
    if log.user is not None:
        rec["user"] = log.user
    return rec


def iter_records(log: RawEventLog) -> Iterable[dict]:
    """Yield the log's records merged in time order (touch first on ties)."""
    yield _meta_record(log)
    merged = [(s.t, 0, i, _touch_record(s)) for i, s in enumerate(log.touch)]
    merged += [(s.t, 1, i, _inertial_record(s)) for i, s in enumerate(log.inertial)]
    merged.sort(key=lambda r: r[:3])
    for *_, rec in merged:
        yield rec


def serialize_log(log: RawEventLog, format: str = "jsonl") -> bytes:
    if format == "jsonl":
        lines = [json.dumps(rec, separators=(",", ":")) for rec in iter_records(log)]
        return ("\n".join(lines) + "\n").encode("utf-8")
    if format == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in iter_records(log):
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
        return buf.getvalue().encode("utf-8")
    raise ValueError(f"unknown log format {format!r}")


# -- segmentation ----------------------------------------------------------


def _window(samples: list[InertialSample], times: list[int], lo: float, hi: float):
    i = bisect.bisect_left(times, lo)
    j = bisect.bisect_right(times, hi)
    return tuple(samples[i:j])


def segment(log: RawEventLog, pad: float = 50.0, report: SegmentReport | None = None) -> list[GestureSegment]:
    """Split the touch stream into down...up gestures with padded sensor windows.

    A second ``down`` while a pointer is active marks the gesture as
    multi-touch; the whole interaction is dropped once all pointers lift.
    """
    if report is None:
        report = SegmentReport()
    streams = {}
    for channel in ("vibration", "rotation"):
        samples = log.inertial_channel(channel)
        streams[channel] = (samples, [s.t for s in samples])

    segments: list[GestureSegment] = []
    current: list[TouchSample] = []
    active = 0
    multitouch = False
    for s in log.touch:
        if s.phase == "down":
            if active:
                multitouch = True
            else:
                current = []
            active += 1
            current.append(s)
        elif s.phase == "move":
            if active:
                current.append(s)
            else:
                report.stray_moves += 1
        else:
            if not active:
                report.orphan_ups += 1
                continue
            active -= 1
            current.append(s)
            if active:
                continue
            if multitouch:
                report.multitouch_dropped += 1
                multitouch = False
                continue
            lo, hi = current[0].t - pad, current[-1].t + pad
            segments.append(GestureSegment(
                touch=tuple(current),
                vibration=_window(*streams["vibration"], lo, hi),
                rotation=_window(*streams["rotation"], lo, hi),
                screen_width=log.screen_width,
                screen_height=log.screen_height,
                label=log.user,
                session=current[0].session,
                index=len(segments),
            ))
    if active:
        report.unmatched_downs += 1
    report.segments = len(segments)
    return segments
