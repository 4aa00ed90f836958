"""Turn gesture segments into uniform-rate observation sequences per sensor."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import PreprocessConfig, stable_hash
from .errors import ScoringError
from .ingest import GestureSegment, SegmentReport, RawEventLog, segment

logger = logging.getLogger(__name__)

CHANNELS = ("touch", "vibration", "rotation")
KINDS = ("tap", "slide")
CHANNEL_DIMS = {"touch": 4, "vibration": 3, "rotation": 3}


@dataclass(frozen=True)
class ObservationSequence:
    channel: str
    rate: float
    frames: np.ndarray  # (T, D)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("frames must be a non-empty (T, D) array")
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class ProcessedGesture:
    kind: str
    sequences: dict  # channel -> ObservationSequence
    duration: float
    config_hash: str
    label: str | None = None
    session: int = 0
    raw_ref: int = 0

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(c for c in CHANNELS if c in self.sequences)

    def restricted(self, channels) -> "ProcessedGesture":
        """Copy keeping only the given channels (touch is always kept)."""
        keep = {c: s for c, s in self.sequences.items() if c in channels or c == "touch"}
        return ProcessedGesture(self.kind, keep, self.duration, self.config_hash,
                                self.label, self.session, self.raw_ref)


def _collapse_ties(t: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, inverse, counts = np.unique(t, return_inverse=True, return_counts=True)
    if len(uniq) == len(t):
        return t, v
    sums = np.zeros((len(uniq), v.shape[1]))
    np.add.at(sums, inverse, v)
    return uniq, sums / counts[:, None]


def resample(times, values, rate: float) -> np.ndarray:
    """Linearly interpolate ``values`` onto a uniform grid at ``rate`` Hz.

    The grid starts at the first timestamp with spacing ``1000 / rate`` ms;
    the last input time is appended when it falls between grid points, so the
    first and last output frames equal the first and last inputs. Duplicate
    timestamps are averaged first. Fewer than two distinct timestamps give a
    two-frame sequence repeating the single value.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if t.ndim != 1 or len(t) != len(v) or len(t) == 0:
        raise ValueError("times and values must be non-empty and of equal length")
    order = np.argsort(t, kind="stable")
    t, v = _collapse_ties(t[order], v[order])
    if len(t) < 2:
        return np.repeat(v[:1], 2, axis=0)
    step = 1000.0 / rate
    span = t[-1] - t[0]
    n = int(np.floor(span / step + 1e-9)) + 1
    grid = t[0] + step * np.arange(n)
    if t[-1] - grid[-1] > 1e-9 * max(1.0, span):
        grid = np.append(grid, t[-1])
    else:
        grid[-1] = min(grid[-1], t[-1])
    out = np.empty((len(grid), v.shape[1]))
    for d in range(v.shape[1]):
        out[:, d] = np.interp(grid, t, v[:, d])
    return out


def path_length_px(segment: GestureSegment) -> float:
    xy = np.array([(s.x, s.y) for s in segment.touch], dtype=float)
    if len(xy) < 2:
        return 0.0
    return float(np.sum(np.hypot(*np.diff(xy, axis=0).T)))


def classify_kind(segment: GestureSegment, tap_max_ms: float = 300.0, tap_max_px: float = 20.0) -> str:
    """Tap iff the gesture is both short and nearly stationary."""
    duration = segment.t_up - segment.t_down
    if duration <= tap_max_ms and path_length_px(segment) <= tap_max_px:
        return "tap"
    return "slide"


def _translate(frames: np.ndarray) -> np.ndarray:
    out = np.array(frames, dtype=float)
    out[:, :2] -= out[0, :2]
    return out


def normalize_rotation(seq: ObservationSequence, scale: bool = True) -> ObservationSequence:
    """Move the start to the origin and rotate the start-to-end chord onto +x.

    With ``scale`` the chord is also rescaled to unit length. Pressure and size
    columns pass through unchanged. A zero-length chord gets translation only.
    """
    if seq.channel != "touch":
        raise ValueError("rotation normalization applies to the touch channel only")
    out = _translate(seq.frames)
    chord = out[-1, :2]
    length = float(np.hypot(*chord))
    if length > 1e-12:
        c, s = chord / length
        rot = np.array([[c, s], [-s, c]])
        out[:, :2] = out[:, :2] @ rot.T
        out[-1, 1] = 0.0
        if scale:
            out[:, :2] /= length
            out[-1, 0] = 1.0
    return ObservationSequence(seq.channel, seq.rate, out)


def touch_points(segment: GestureSegment) -> tuple[np.ndarray, np.ndarray]:
    t = np.array([s.t for s in segment.touch], dtype=float)
    v = np.array(
        [(s.x / segment.screen_width, s.y / segment.screen_height, s.pressure, s.size)
         for s in segment.touch],
        dtype=float,
    )
    return t, v


def build_processed(segment: GestureSegment, cfg: PreprocessConfig | None = None) -> ProcessedGesture:
    """Resample every available channel and normalize the touch trajectory.

    Raises:
        ScoringError: the segment carries no touch samples.
    """
    cfg = cfg or PreprocessConfig()
    if not segment.touch:
        raise ScoringError("gesture has no touch samples")
    kind = classify_kind(segment, cfg.tap_max_ms, cfg.tap_max_px)
    t, v = touch_points(segment)
    touch = ObservationSequence("touch", cfg.rate_hz, resample(t, v, cfg.rate_hz))
    if kind == "slide":
        touch = normalize_rotation(touch, scale=cfg.scale_normalize)
    else:
        touch = ObservationSequence("touch", cfg.rate_hz, _translate(touch.frames))
    sequences = {"touch": touch}
    for channel in ("vibration", "rotation"):
        samples = getattr(segment, channel)
        if not samples:
            continue
        ct = np.array([s.t for s in samples], dtype=float)
        cv = np.array([s.v for s in samples], dtype=float)
        sequences[channel] = ObservationSequence(channel, cfg.rate_hz, resample(ct, cv, cfg.rate_hz))
    return ProcessedGesture(
        kind=kind,
        sequences=sequences,
        duration=float(segment.t_up - segment.t_down),
        config_hash=preprocess_hash(cfg),
        label=segment.label,
        session=segment.session,
        raw_ref=segment.index,
    )


def preprocess_hash(cfg: PreprocessConfig) -> str:
    return stable_hash(cfg.model_dump(mode="json"))


def process_log(log: RawEventLog, cfg: PreprocessConfig | None = None,
                report: SegmentReport | None = None) -> list[ProcessedGesture]:
    """Segment a log and preprocess every gesture in order."""
    cfg = cfg or PreprocessConfig()
    out = []
    for seg in segment(log, pad=cfg.pad_ms, report=report):
        try:
            out.append(build_processed(seg, cfg))
        except ScoringError as exc:
            logger.warning("gesture %d rejected: %s", seg.index, exc)
    return out
