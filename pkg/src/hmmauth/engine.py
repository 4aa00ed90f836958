"""Continuous accept/reject decisions over a sliding window of gesture scores."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import MixedSubjectsError
from .preprocess import ProcessedGesture
from .template import UserTemplate, owner_of, score_batch

THRESHOLD_MODES = ("balanced", "zero_frr_quantile", "zero_far_guard")
ZERO_FRR_MARGIN = 0.01


class ScoreWindow:
    """FIFO of the ``capacity`` most recent fused scores."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self.scores: deque[float] = deque(maxlen=capacity)
        self.observed = 0

    def push(self, score: float) -> None:
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score {score} outside [0, 1]")
        self.scores.append(float(score))
        self.observed += 1

    @property
    def full(self) -> bool:
        return len(self.scores) == self.capacity

    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else 0.0


@dataclass(frozen=True)
class Decision:
    verdict: str  # accept | reject | undecided
    window_mean: float
    gestures_observed: int
    threshold_used: float

    @property
    def fallback(self) -> bool:
        """True when the device should fall back to explicit authentication."""
        return self.verdict == "reject"


def push_and_decide(window: ScoreWindow, score: float, threshold: float) -> Decision:
    window.push(score)
    mean = window.mean()
    if not window.full:
        verdict = "undecided"
    else:
        verdict = "accept" if mean >= threshold else "reject"
    return Decision(verdict, mean, window.observed, float(threshold))


def sliding_means(scores, k: int) -> np.ndarray:
    """Mean of every run of ``k`` consecutive scores (len - k + 1 values)."""
    s = np.asarray(scores, dtype=float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(s) < k:
        return np.empty(0)
    return np.lib.stride_tricks.sliding_window_view(s, k).mean(axis=1)


def calibrate_threshold(template: UserTemplate, holdout: list[ProcessedGesture], target: str, k: int) -> float:
    """Pick a decision threshold from owner-only held-out gestures.

    ``balanced`` takes the 5th percentile of the owner's window means,
    ``zero_frr_quantile`` the minimum minus 0.01, and ``zero_far_guard`` the
    1st percentile. The result is clamped to [0, 1].

    Raises:
        ValueError: unknown mode, or fewer usable gestures than ``k``.
        MixedSubjectsError: the holdout carries another subject's label.
    """
    if target not in THRESHOLD_MODES:
        raise ValueError(f"unknown threshold mode {target!r}")
    owner = owner_of(holdout)
    if owner is not None and template.owner is not None and owner != template.owner:
        raise MixedSubjectsError(f"holdout belongs to {owner!r}, template to {template.owner!r}")
    scores = [s.fused for s in score_batch(template, holdout) if s is not None]
    means = sliding_means(scores, k)
    if len(means) == 0:
        raise ValueError(f"holdout has {len(scores)} usable gestures, need at least k={k}")
    return threshold_from_means(means, target)


def threshold_from_means(means, target: str) -> float:
    means = np.asarray(means, dtype=float)
    if target == "balanced":
        t = np.percentile(means, 5)
    elif target == "zero_frr_quantile":
        t = means.min() - ZERO_FRR_MARGIN
    else:
        t = np.percentile(means, 1)
    return float(np.clip(t, 0.0, 1.0))


@dataclass(frozen=True)
class DecisionRecord:
    index: int
    kind: str
    channels_used: tuple[str, ...]
    fused: float | None
    decision: Decision | None

    def to_json(self) -> str:
        d = self.decision
        return json.dumps({
            "gesture": self.index,
            "kind": self.kind,
            "channels_used": list(self.channels_used),
            "fused": self.fused,
            "window_mean": None if d is None else d.window_mean,
            "verdict": "skipped" if d is None else d.verdict,
            "threshold": None if d is None else d.threshold_used,
        }, separators=(",", ":"))


class AuthSession:
    """Single-writer session: feed gestures in order, get decisions back.

    ``on_reject`` is called with the rejecting ``Decision``; it is the hook to
    invoke a password or pattern prompt.
    """

    def __init__(self, template: UserTemplate, threshold: float, k: int,
                 on_reject: Callable[[Decision], None] | None = None):
        self.template = template
        self.threshold = float(threshold)
        self.window = ScoreWindow(k)
        self.on_reject = on_reject
        self.index = 0

    def process(self, gestures: Iterable[ProcessedGesture]) -> list[DecisionRecord]:
        gestures = list(gestures)
        records = []
        for g, score in zip(gestures, score_batch(self.template, gestures)):
            if score is None:
                records.append(DecisionRecord(self.index, g.kind, (), None, None))
            else:
                decision = push_and_decide(self.window, score.fused, self.threshold)
                if decision.fallback and self.on_reject is not None:
                    self.on_reject(decision)
                records.append(DecisionRecord(self.index, g.kind, score.channels_used,
                                              score.fused, decision))
            self.index += 1
        return records

    def process_one(self, gesture: ProcessedGesture) -> DecisionRecord:
        return self.process([gesture])[0]


def summarize(records: list[DecisionRecord]) -> dict:
    counts = {"accept": 0, "reject": 0, "undecided": 0, "skipped": 0}
    for r in records:
        counts["skipped" if r.decision is None else r.decision.verdict] += 1
    return counts

