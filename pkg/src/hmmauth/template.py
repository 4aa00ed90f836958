"""Enrollment of a single owner and per-gesture similarity scoring."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import HmmConfig, RunConfig, ScoringConfig
from .errors import ConfigMismatchError, EnrollmentError, MixedSubjectsError, ScoringError
from .hmm import HmmModel, Selection, _child_seed, forward_batch, select_model, viterbi_batch
from .preprocess import CHANNELS, KINDS, ProcessedGesture

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = 1


@dataclass(frozen=True)
class ChannelModel:
    model: HmmModel
    ll_mean: float
    ll_std: float
    occ_ref: np.ndarray
    n_train: int = 0
    cv_scores: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "ll_mean": self.ll_mean,
            "ll_std": self.ll_std,
            "occ_ref": np.asarray(self.occ_ref).tolist(),
            "n_train": self.n_train,
            "cv_scores": {f"{n},{m}": (v if np.isfinite(v) else None)
                          for (n, m), v in sorted(self.cv_scores.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelModel":
        scores = {tuple(int(x) for x in k.split(",")): (-np.inf if v is None else v)
                  for k, v in d.get("cv_scores", {}).items()}
        return cls(HmmModel.from_dict(d["model"]), d["ll_mean"], d["ll_std"],
                   np.asarray(d["occ_ref"], dtype=float), d.get("n_train", 0), scores)


@dataclass(frozen=True)
class UserTemplate:
    models: dict  # kind -> {channel -> ChannelModel}
    preprocess_hash: str
    config_hash: str
    scoring: ScoringConfig
    owner: str | None = None
    metadata: dict = field(default_factory=dict)

    def kinds(self) -> tuple[str, ...]:
        return tuple(k for k in KINDS if k in self.models)

    def to_json(self) -> str:
        doc = {
            "version": TEMPLATE_VERSION,
            "owner": self.owner,
            "preprocess_hash": self.preprocess_hash,
            "config_hash": self.config_hash,
            "scoring": self.scoring.model_dump(mode="json"),
            "metadata": self.metadata,
            "models": {
                kind: {ch: cm.to_dict() for ch, cm in chans.items()}
                for kind, chans in self.models.items()
            },
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "UserTemplate":
        doc = json.loads(text)
        if doc.get("version") != TEMPLATE_VERSION:
            raise ValueError(f"unsupported template version {doc.get('version')!r}")
        models = {
            kind: {ch: ChannelModel.from_dict(cm) for ch, cm in chans.items()}
            for kind, chans in doc["models"].items()
        }
        return cls(models, doc["preprocess_hash"], doc["config_hash"],
                   ScoringConfig.model_validate(doc["scoring"]), doc.get("owner"),
                   doc.get("metadata", {}))

    def with_metadata(self, **extra) -> "UserTemplate":
        meta = dict(self.metadata)
        meta.update(extra)
        return UserTemplate(self.models, self.preprocess_hash, self.config_hash,
                            self.scoring, self.owner, meta)


@dataclass(frozen=True)
class ChannelScore:
    ll_score: float
    s_ll: float
    kin_score: float
    combined: float


@dataclass(frozen=True)
class GestureScore:
    kind: str
    channels: dict  # channel -> ChannelScore

    @property
    def channels_used(self) -> tuple[str, ...]:
        return tuple(c for c in CHANNELS if c in self.channels)

    @property
    def fused(self) -> float:
        return fuse([self.channels[c].combined for c in self.channels_used])

    def restricted(self, channels) -> "GestureScore":
        return GestureScore(self.kind, {c: s for c, s in self.channels.items() if c in channels})


def fuse(combined) -> float:
    """Arithmetic mean of per-channel combined scores."""
    vals = list(combined)
    if not vals:
        raise ScoringError("no usable channel to fuse")
    return float(sum(vals) / len(vals))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def kinematics_score(occupancy, occ_ref) -> float:
    """1 - half the L1 distance between two occupancy distributions, in [0, 1]."""
    occ = np.asarray(occupancy, dtype=float)
    ref = np.asarray(occ_ref, dtype=float)
    return float(np.clip(1.0 - 0.5 * np.abs(occ - ref).sum(), 0.0, 1.0))


def channel_score(per_frame_ll: float, occupancy, cm: ChannelModel, scoring: ScoringConfig) -> ChannelScore:
    z = (per_frame_ll - cm.ll_mean) / cm.ll_std
    s_ll = float(_sigmoid(scoring.slope * z))
    kin = kinematics_score(occupancy, cm.occ_ref)
    w = scoring.ll_weight
    return ChannelScore(float(z), s_ll, kin, w * s_ll + (1.0 - w) * kin)


def _decode_stats(model: HmmModel, seqs) -> tuple[np.ndarray, list[np.ndarray]]:
    lengths = np.array([len(s) for s in seqs], dtype=float)
    per_frame = forward_batch(model, seqs) / lengths
    occ = [r.occupancy for r in viterbi_batch(model, seqs)]
    return per_frame, occ


def _fit_channel(seqs, kind: str, hcfg: HmmConfig, scoring: ScoringConfig, seed) -> ChannelModel:
    sel: Selection = select_model(
        seqs, hcfg.states_for(kind), hcfg.mixtures, folds=hcfg.folds, seed=seed,
        tol=hcfg.tol, max_iter=hcfg.max_iter, var_floor=hcfg.var_floor,
    )
    per_frame, occ = _decode_stats(sel.model, seqs)
    occ_ref = np.mean(occ, axis=0)
    occ_ref = occ_ref / occ_ref.sum()
    model = HmmModel(sel.model.pi, sel.model.A, sel.model.weights, sel.model.means,
                     sel.model.variances, sel.model.var_floor,
                     {"fallback": sel.fallback, "iterations": len(sel.history)})
    return ChannelModel(
        model=model,
        ll_mean=float(per_frame.mean()),
        ll_std=float(max(per_frame.std(), scoring.ll_std_floor)),
        occ_ref=occ_ref,
        n_train=len(seqs),
        cv_scores=sel.scores,
    )


def owner_of(gestures) -> str | None:
    """The single subject label carried by ``gestures``.

    Raises:
        MixedSubjectsError: gestures from more than one labelled subject.
    """
    labels = {g.label for g in gestures if g.label is not None}
    if len(labels) > 1:
        raise MixedSubjectsError(f"training data mixes subjects {sorted(labels)}; "
                              "a template is built from its owner's gestures only")
    return labels.pop() if labels else None


def enroll(gestures: list[ProcessedGesture], cfg: RunConfig | None = None, seed: int | None = None) -> UserTemplate:
    """Train one template from a single owner's gestures.

    For every gesture kind with at least ``cfg.scoring.min_enroll`` examples
    and every channel present in enough of them, an HMM is selected by
    cross-validation, then scored on its own training data to fix the
    per-frame log-likelihood statistics and reference state occupancy.

    Raises:
        EnrollmentError: no kind reaches the minimum count, or the input
            mixes subjects.
        ConfigMismatchError: gestures were preprocessed under different
            configurations.
    """
    cfg = cfg or RunConfig()
    seed = cfg.seed if seed is None else seed
    owner = owner_of(gestures)
    hashes = {g.config_hash for g in gestures}
    if len(hashes) > 1:
        raise ConfigMismatchError("gestures were preprocessed under different configurations")
    expected = cfg.preprocess_hash()
    if hashes and hashes != {expected}:
        raise ConfigMismatchError("gestures were not preprocessed with this run configuration")

    minimum = cfg.scoring.min_enroll
    counts = {kind: {} for kind in KINDS}
    models = {}
    skipped = {}
    for ki, kind in enumerate(KINDS):
        group = [g for g in gestures if g.kind == kind]
        counts[kind]["gestures"] = len(group)
        if len(group) < minimum:
            skipped[kind] = len(group)
            continue
        chans = {}
        for ci, channel in enumerate(CHANNELS):
            seqs = [g.sequences[channel] for g in group if channel in g.sequences]
            counts[kind][channel] = len(seqs)
            if len(seqs) < minimum:
                continue
            chans[channel] = _fit_channel(seqs, kind, cfg.hmm, cfg.scoring, _child_seed(seed, ki, ci))
        models[kind] = chans
    if not models:
        raise EnrollmentError(
            f"no gesture kind reached {minimum} enrollment samples: "
            + ", ".join(f"{k}={c['gestures']}" for k, c in counts.items()),
            counts=counts,
        )
    for kind in skipped:
        logger.info("kind %s not enrolled: %d < %d gestures", kind, skipped[kind], minimum)
    metadata = {
        "counts": counts,
        "seed": int(seed),
        "skipped_kinds": sorted(skipped),
        "selected": {k: {c: [cm.model.n_states, cm.model.n_mix] for c, cm in ch.items()}
                     for k, ch in models.items()},
    }
    return UserTemplate(models, expected, cfg.hash(), cfg.scoring, owner, metadata)


def score_batch(template: UserTemplate, gestures: list[ProcessedGesture]) -> list[GestureScore | None]:
    """Score many gestures at once; ``None`` for gestures of an un-enrolled kind.

    Gestures are grouped per (kind, channel) so each HMM runs one batched
    forward and Viterbi pass. The result equals scoring one at a time.

    Raises:
        ConfigMismatchError: a gesture was preprocessed under another config.
    """
    for g in gestures:
        if g.config_hash != template.preprocess_hash:
            raise ConfigMismatchError(
                f"gesture preprocessed with config {g.config_hash}, template expects "
                f"{template.preprocess_hash}")
    per_gesture = [dict() for _ in gestures]
    for kind, chans in template.models.items():
        for channel, cm in chans.items():
            idx = [i for i, g in enumerate(gestures) if g.kind == kind and channel in g.sequences]
            if not idx:
                continue
            seqs = [gestures[i].sequences[channel] for i in idx]
            per_frame, occ = _decode_stats(cm.model, seqs)
            for j, i in enumerate(idx):
                per_gesture[i][channel] = channel_score(per_frame[j], occ[j], cm, template.scoring)
    out = []
    for g, chans in zip(gestures, per_gesture):
        if g.kind not in template.models or not chans:
            out.append(None)
        else:
            out.append(GestureScore(g.kind, chans))
    return out


def similarity(template: UserTemplate, gesture: ProcessedGesture) -> GestureScore:
    """Combined similarity of one gesture to the template.

    Raises:
        ScoringError: the gesture's kind is not enrolled or none of its
            channels has a model.
    """
    if gesture.kind not in template.models:
        raise ScoringError(f"gesture kind {gesture.kind!r} is not enrolled")
    score = score_batch(template, [gesture])[0]
    if score is None:
        raise ScoringError("gesture shares no channel with the template")
    return score
