"""FAR / FRR / EER as functions of window size, per user and population-wide."""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .engine import sliding_means
from .errors import EnrollmentError, EvaluationError
from .hmm import _child_seed
from .ingest import parse_log
from .preprocess import ProcessedGesture, process_log
from .template import GestureScore, UserTemplate, enroll, fuse, score_batch

logger = logging.getLogger(__name__)

EPS = 1e-9
PER_USER_COLUMNS = ("user", "k", "eer", "eer_threshold", "far_at_zero_frr", "frr_at_zero_far")
SUMMARY_COLUMNS = (
    "k", "n_users", "median_eer", "q1", "q3", "whisker_low", "whisker_high", "outliers",
    "median_far_at_zero_frr", "median_frr_at_zero_far",
)


# -- rates ------------------------------------------------------------------


def _sorted(scores) -> np.ndarray:
    arr = np.sort(np.asarray(scores, dtype=float))
    if arr.size == 0:
        raise ValueError("score list is empty")
    return arr


def _rates(gen: np.ndarray, imp: np.ndarray, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # accept iff score >= threshold
    n_rejected_gen = np.searchsorted(gen, thresholds, side="left")
    n_accepted_imp = imp.size - np.searchsorted(imp, thresholds, side="left")
    return n_accepted_imp / imp.size, n_rejected_gen / gen.size


def far_frr(genuine, impostor, threshold: float) -> tuple[float, float]:
    """FAR = share of impostor scores >= threshold; FRR = share of genuine < threshold."""
    far, frr = _rates(_sorted(genuine), _sorted(impostor), np.array([threshold], dtype=float))
    return float(far[0]), float(frr[0])


def candidate_thresholds(gen: np.ndarray, imp: np.ndarray) -> np.ndarray:
    pooled = np.unique(np.concatenate([gen, imp]))
    return np.concatenate([[pooled[0] - EPS], pooled, [pooled[-1] + EPS]])


def eer(genuine, impostor) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Thresholds sweep the pooled score values plus one point beyond each end.
    The EER is (FAR + FRR) / 2 at the threshold minimizing |FAR - FRR|; ties
    go to the lower threshold.
    """
    gen, imp = _sorted(genuine), _sorted(impostor)
    thr = candidate_thresholds(gen, imp)
    far, frr = _rates(gen, imp, thr)
    i = int(np.argmin(np.abs(far - frr)))
    return float((far[i] + frr[i]) / 2.0), float(thr[i])


def far_at_zero_frr(genuine, impostor) -> float:
    """FAR at the largest threshold that rejects no genuine score."""
    gen, imp = _sorted(genuine), _sorted(impostor)
    far, _ = _rates(gen, imp, np.array([gen[0]]))
    return float(far[0])


def frr_at_zero_far(genuine, impostor) -> float:
    """FRR at the smallest swept threshold that accepts no impostor score."""
    gen, imp = _sorted(genuine), _sorted(impostor)
    thr = candidate_thresholds(gen, imp)
    t = thr[np.searchsorted(thr, imp[-1], side="right")]
    _, frr = _rates(gen, imp, np.array([t]))
    return float(frr[0])


def fixed_rate_curves(genuine: dict, impostor: dict, mode: str, k_grid) -> dict:
    """Per-k ``far_at_zero_frr`` or ``frr_at_zero_far`` from per-k score lists."""
    fn = {"far_at_zero_frr": far_at_zero_frr, "frr_at_zero_far": frr_at_zero_far}[mode]
    return {k: fn(genuine[k], impostor[k]) for k in k_grid if len(genuine.get(k, ())) and len(impostor.get(k, ()))}


@dataclass
class ErrorCurve:
    k: int
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    eer: float
    eer_threshold: float
    far_at_zero_frr: float
    frr_at_zero_far: float
    n_genuine: int = 0
    n_impostor: int = 0


def error_curve(genuine, impostor, k: int) -> ErrorCurve:
    gen, imp = _sorted(genuine), _sorted(impostor)
    thr = candidate_thresholds(gen, imp)
    far, frr = _rates(gen, imp, thr)
    e, et = eer(gen, imp)
    return ErrorCurve(k, thr, far, frr, e, et, far_at_zero_frr(gen, imp),
                      frr_at_zero_far(gen, imp), gen.size, imp.size)


# -- windows ------------------------------------------------------------------


def fused_scores(scores: list[GestureScore | None], channels=None) -> list[float]:
    out = []
    for s in scores:
        if s is None:
            continue
        used = [c for c in s.channels_used if channels is None or c in channels]
        if used:
            out.append(fuse(s.channels[c].combined for c in used))
    return out


def window_scores(template: UserTemplate, gestures: list[ProcessedGesture], k: int,
                  channels=None) -> np.ndarray:
    """Sliding mean over each run of ``k`` consecutive scored gestures.

    Gestures of a kind the template lacks are skipped (and logged).
    """
    scores = score_batch(template, gestures)
    skipped = sum(s is None for s in scores)
    if skipped:
        logger.info("skipped %d gestures of un-enrolled kinds", skipped)
    return sliding_means(fused_scores(scores, channels), k)


# -- population protocol ------------------------------------------------------


@dataclass
class BoxStats:
    n: int
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list


def box_stats(values) -> BoxStats:
    v = np.sort(np.asarray(values, dtype=float))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return BoxStats(len(v), float(med), float(q1), float(q3), float(inside.min()),
                    float(inside.max()), [float(x) for x in v[(v < lo) | (v > hi)]])


@dataclass
class ProtocolResult:
    curves: dict  # mode -> user -> k -> ErrorCurve
    summary: dict  # mode -> k -> (BoxStats, median far@frr0, median frr@far0)
    excluded: dict
    metadata: dict = field(default_factory=dict)

    def median_eer(self, mode: str) -> dict:
        return {k: s[0].median for k, s in self.summary[mode].items()}


def user_seed(seed: int, user: str):
    return _child_seed(seed, zlib.crc32(user.encode("utf-8")))


def split_sessions(gestures, train_sessions) -> tuple[list, list]:
    train_sessions = set(train_sessions)
    train = [g for g in gestures if g.session in train_sessions]
    test = [g for g in gestures if g.session not in train_sessions]
    return train, test


def enroll_population(corpus: dict, cfg: RunConfig) -> tuple[dict, dict]:
    """Enroll each user on their own training sessions only."""
    templates, excluded = {}, {}
    for user in sorted(corpus):
        train, _ = split_sessions(corpus[user], cfg.evaluation.train_sessions)
        try:
            seed = int(user_seed(cfg.seed, user).generate_state(1)[0])
            templates[user] = enroll(train, cfg, seed=seed)
        except EnrollmentError as exc:
            logger.warning("user %s excluded: %s", user, exc)
            excluded[user] = str(exc)
    return templates, excluded


def _select(gestures, mode):
    return gestures if mode == "mixed" else [g for g in gestures if g.kind == mode]


def protocol_run(corpus: dict, cfg: RunConfig, templates: dict | None = None,
                 channels=None, modes=None) -> ProtocolResult:
    """Enroll on training sessions, then score every user's test stream.

    Genuine windows come from the owner's test sessions; impostor windows
    come from each other user's test sessions, one impostor per window, and
    are pooled across impostors.

    Raises:
        EvaluationError: fewer than two users.
    """
    if len(corpus) < 2:
        raise EvaluationError("evaluation needs at least two users to form impostor trials")
    channels = tuple(channels or cfg.evaluation.channels)
    modes = tuple(modes or cfg.evaluation.modes)
    k_grid = cfg.evaluation.k_grid
    excluded = {}
    if templates is None:
        templates, excluded = enroll_population(corpus, cfg)
    users = sorted(corpus)
    tests = {}
    for user in users:
        train, test = split_sessions(corpus[user], cfg.evaluation.train_sessions)
        assert not {id(g) for g in train} & {id(g) for g in test}
        tests[user] = test

    curves = {m: {} for m in modes}
    for owner in sorted(templates):
        tmpl = templates[owner]
        scored = {u: score_batch(tmpl, tests[u]) for u in users}
        for mode in modes:
            per_k = {}
            streams = {}
            for u in users:
                pairs = [s for g, s in zip(tests[u], scored[u]) if mode == "mixed" or g.kind == mode]
                streams[u] = fused_scores(pairs, channels)
            for k in k_grid:
                gen = sliding_means(streams[owner], k)
                imp = [sliding_means(streams[u], k) for u in users if u != owner]
                imp = np.concatenate(imp) if imp else np.empty(0)
                if gen.size == 0 or imp.size == 0:
                    continue
                per_k[k] = error_curve(gen, imp, k)
            if per_k:
                curves[mode][owner] = per_k

    summary = {}
    for mode in modes:
        summary[mode] = {}
        for k in k_grid:
            rows = [c[k] for c in curves[mode].values() if k in c]
            if not rows:
                continue
            summary[mode][k] = (
                box_stats([r.eer for r in rows]),
                float(np.median([r.far_at_zero_frr for r in rows])),
                float(np.median([r.frr_at_zero_far for r in rows])),
            )
    metadata = {
        "impostor_scores": "pooled",
        "channels": list(channels),
        "config_hash": cfg.hash(),
        "users": users,
        "excluded": excluded,
    }
    return ProtocolResult(curves, summary, excluded, metadata)


# -- corpus and outputs ---------------------------------------------------------


def load_corpus(corpus_dir: str | Path, cfg: RunConfig, fmt: str = "jsonl") -> dict:
    """Read one log per user (file stem is the fallback user id)."""
    corpus = {}
    for path in sorted(Path(corpus_dir).glob(f"*.{fmt}")):
        log = parse_log(path.read_bytes(), fmt, cfg.preprocess.reorder_ms)
        user = log.user or path.stem
        if user in corpus:
            raise EvaluationError(f"duplicate user id {user!r} in corpus")
        gestures = process_log(log, cfg.preprocess)
        corpus[user] = [g if g.label is not None else _relabel(g, user) for g in gestures]
    return corpus


def _relabel(g: ProcessedGesture, user: str) -> ProcessedGesture:
    return ProcessedGesture(g.kind, g.sequences, g.duration, g.config_hash, user, g.session, g.raw_ref)


def _fmt(x) -> str:
    return repr(float(x))


def write_per_user_csv(result: ProtocolResult, mode: str, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PER_USER_COLUMNS)
        for user in sorted(result.curves[mode]):
            for k, c in sorted(result.curves[mode][user].items()):
                w.writerow([user, k, _fmt(c.eer), _fmt(c.eer_threshold),
                            _fmt(c.far_at_zero_frr), _fmt(c.frr_at_zero_far)])


def write_summary_csv(result: ProtocolResult, mode: str, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for k, (b, far0, frr0) in sorted(result.summary[mode].items()):
            w.writerow([k, b.n, _fmt(b.median), _fmt(b.q1), _fmt(b.q3), _fmt(b.whisker_low),
                        _fmt(b.whisker_high), ";".join(_fmt(x) for x in b.outliers),
                        _fmt(far0), _fmt(frr0)])


def write_outputs(result: ProtocolResult, out_dir: str | Path, plots: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for mode in result.curves:
        p = out / f"per_user_{mode}.csv"
        write_per_user_csv(result, mode, p)
        s = out / f"summary_{mode}.csv"
        write_summary_csv(result, mode, s)
        written += [p, s]
        if plots and result.summary[mode]:
            from .plots import plot_summary
            svg = out / f"eer_{mode}.svg"
            plot_summary(result, mode, svg)
            written.append(svg)
    meta = out / "metadata.json"
    meta.write_text(json.dumps(result.metadata, sort_keys=True, indent=1) + "\n")
    written.append(meta)
    return written
