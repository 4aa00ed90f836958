"""Synthetic gesture streams sampled from known left-right GMM-HMMs.

Ground-truth touch models emit ``[x / screen_w, y / screen_h, pressure, size]``
frames; inertial models emit raw 3-axis readings. Sampled frames are
rendered back to raw log records at the preprocessing rate, so ingesting a
synthetic corpus reproduces the sampled sequences up to clamping and the
touch normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SpecError
from .hmm import HmmModel, make_model
from .ingest import InertialSample, RawEventLog, TouchSample, serialize_log
from .preprocess import CHANNEL_DIMS, CHANNELS, KINDS, ObservationSequence

SPEC_VERSION = 1


@dataclass(frozen=True)
class KindSpec:
    models: dict  # channel -> HmmModel
    min_len: int
    max_len: int
    proportion: float = 1.0
    availability: dict = field(default_factory=dict)  # channel -> probability

    def available(self, channel: str) -> float:
        return self.availability.get(channel, 1.0)


@dataclass(frozen=True)
class SyntheticUserSpec:
    user: str
    kinds: dict  # kind -> KindSpec
    screen_w: int = 768
    screen_h: int = 1280

    def check(self) -> None:
        if not self.kinds:
            raise SpecError(f"user {self.user}: no gesture kinds")
        for kind, ks in self.kinds.items():
            if kind not in KINDS:
                raise SpecError(f"user {self.user}: unknown kind {kind!r}")
            if "touch" not in ks.models:
                raise SpecError(f"user {self.user}/{kind}: touch model required")
            if not 2 <= ks.min_len <= ks.max_len:
                raise SpecError(f"user {self.user}/{kind}: need 2 <= min_len <= max_len")
            if ks.proportion < 0:
                raise SpecError(f"user {self.user}/{kind}: negative proportion")
            for ch, model in ks.models.items():
                if ch not in CHANNELS or model.dim != CHANNEL_DIMS[ch]:
                    raise SpecError(f"user {self.user}/{kind}: bad channel {ch!r}")
                try:
                    model.check()
                except ValueError as exc:
                    raise SpecError(f"user {self.user}/{kind}/{ch}: {exc}") from exc
            for ch, p in ks.availability.items():
                if not 0.0 <= p <= 1.0:
                    raise SpecError(f"user {self.user}/{kind}: availability {p} outside [0, 1]")


def sample_sequence(model: HmmModel, T: int, seed=None, channel: str = "touch",
                    rate: float = 50.0) -> ObservationSequence:
    """Draw a state path from the left-right chain, then one mixture draw per frame."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random(T)
    states = np.zeros(T, dtype=int)
    s = 0
    for t in range(1, T):
        if u[t] >= model.A[s, s]:
            s += 1
        states[t] = s
    comps = np.array([rng.choice(model.n_mix, p=model.weights[s]) for s in states])
    z = rng.standard_normal((T, model.dim))
    frames = model.means[states, comps] + np.sqrt(model.variances[states, comps]) * z
    return ObservationSequence(channel, rate, frames)


@dataclass
class SyntheticCorpus:
    logs: dict  # user -> RawEventLog
    sampled: dict  # user -> list of {"kind", "session", "frames": {channel: ndarray}}
    clamp_rate: float
    rate: float

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for user in sorted(self.logs):
            p = out / f"{user}.jsonl"
            p.write_bytes(serialize_log(self.logs[user]))
            paths.append(p)
        return paths


def _render_user(spec: SyntheticUserSpec, n: int, rng: np.random.Generator, rate: float,
                 sessions: int, gap_ms: int, counters: list[int]):
    kinds = sorted(spec.kinds)
    props = np.array([spec.kinds[k].proportion for k in kinds], dtype=float)
    props = props / props.sum() if props.sum() > 0 else np.full(len(kinds), 1.0 / len(kinds))
    step = 1000.0 / rate
    touch, inertial, sampled = [], [], []
    t0 = gap_ms
    W, H = spec.screen_w, spec.screen_h
    for i in range(n):
        kind = kinds[int(rng.choice(len(kinds), p=props))]
        ks = spec.kinds[kind]
        T = int(rng.integers(ks.min_len, ks.max_len + 1))
        session = 1 + (i * sessions) // n
        times = [t0 + int(round(j * step)) for j in range(T)]
        frames = {}
        for ch in CHANNELS:
            if ch not in ks.models:
                continue
            if ch != "touch" and rng.random() >= ks.available(ch):
                continue
            seq = sample_sequence(ks.models[ch], T, rng, ch, rate).frames
            if ch == "touch":
                clipped = np.clip(seq, 0.0, 1.0)
                counters[0] += int(np.sum(clipped != seq))
                counters[1] += seq.size
                seq = clipped
            frames[ch] = seq
        for j, (t, f) in enumerate(zip(times, frames["touch"])):
            phase = "down" if j == 0 else ("up" if j == T - 1 else "move")
            touch.append(TouchSample(t, float(f[0] * W), float(f[1] * H), float(f[2]),
                                     float(f[3]), phase, session))
        for ch in ("vibration", "rotation"):
            if ch in frames:
                inertial += [InertialSample(t, ch, tuple(float(x) for x in f))
                             for t, f in zip(times, frames[ch])]
        # rendered back to pixels, so the sampled touch frames are stored in that precision
        frames["touch"] = np.array([[s.x / W, s.y / H, s.pressure, s.size] for s in touch[-T:]])
        sampled.append({"kind": kind, "session": session, "frames": frames})
        t0 = times[-1] + gap_ms
    inertial.sort(key=lambda s: s.t)
    log = RawEventLog(W, H, tuple(touch), tuple(inertial), spec.user)
    return log, sampled


def sample_population(specs: list[SyntheticUserSpec], gestures_per_user: int, seed=None,
                      rate: float = 50.0, sessions: int = 5, gap_ms: int = 400) -> SyntheticCorpus:
    """Sample a labelled corpus: gestures are spread evenly over ``sessions``.

    ``gap_ms`` separates consecutive gestures; keep it above twice the
    segmentation pad so sensor windows never overlap.
    """
    if not specs:
        raise SpecError("population needs at least one user spec")
    root = np.random.SeedSequence(seed)
    logs, sampled = {}, {}
    counters = [0, 0]
    for spec, child in zip(specs, root.spawn(len(specs))):
        spec.check()
        if spec.user in logs:
            raise SpecError(f"duplicate user id {spec.user!r}")
        rng = np.random.default_rng(child)
        logs[spec.user], sampled[spec.user] = _render_user(
            spec, gestures_per_user, rng, rate, sessions, gap_ms, counters)
    clamp = counters[0] / counters[1] if counters[1] else 0.0
    return SyntheticCorpus(logs, sampled, clamp, rate)


# -- spec files ---------------------------------------------------------------


def spec_to_dict(specs: list[SyntheticUserSpec], **settings) -> dict:
    users = []
    for s in specs:
        kinds = {}
        for kind, ks in sorted(s.kinds.items()):
            kinds[kind] = {
                "proportion": ks.proportion,
                "length": [ks.min_len, ks.max_len],
                "channels": {
                    ch: {"availability": ks.available(ch), "model": m.to_dict()}
                    for ch, m in ks.models.items()
                },
            }
        users.append({"user": s.user, "screen_w": s.screen_w, "screen_h": s.screen_h, "kinds": kinds})
    doc = {"version": SPEC_VERSION}
    doc.update(settings)
    doc["users"] = users
    return doc


def spec_from_dict(doc: dict) -> tuple[list[SyntheticUserSpec], dict]:
    """Parse a spec document into user specs plus sampling settings.

    Raises:
        SpecError: any schema violation.
    """
    try:
        if doc.get("version") != SPEC_VERSION:
            raise SpecError(f"unsupported spec version {doc.get('version')!r}")
        specs = []
        for u in doc["users"]:
            kinds = {}
            for kind, kd in u["kinds"].items():
                models, avail = {}, {}
                for ch, cd in kd["channels"].items():
                    models[ch] = HmmModel.from_dict(cd["model"])
                    avail[ch] = float(cd.get("availability", 1.0))
                lo, hi = kd["length"]
                kinds[kind] = KindSpec(models, int(lo), int(hi), float(kd.get("proportion", 1.0)), avail)
            spec = SyntheticUserSpec(str(u["user"]), kinds, int(u.get("screen_w", 768)),
                                     int(u.get("screen_h", 1280)))
            spec.check()
            specs.append(spec)
    except SpecError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"invalid synthetic spec: {exc!r}") from exc
    if not specs:
        raise SpecError("spec lists no users")
    settings = {k: doc[k] for k in ("rate_hz", "gestures_per_user", "sessions", "gap_ms") if k in doc}
    return specs, settings


def load_spec(path: str | Path) -> tuple[list[SyntheticUserSpec], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecError("spec must be a JSON object")
    return spec_from_dict(doc)


# -- random populations -------------------------------------------------------

# per-channel noise scale of the ground-truth emissions
_NOISE = {"pressure": 0.04, "size": 0.03, "vibration": 0.25, "rotation": 0.05}


def random_user_spec(user: str, rng: np.random.Generator, separation: float = 1.0,
                     inertial_separation: float | None = None, inertial: bool = True,
                     slide_states: int = 4, tap_states: int = 2, tap_share: float = 0.5,
                     screen=(768, 1280)) -> SyntheticUserSpec:
    """One synthetic owner whose parameters deviate from a shared base.

    Per-state pressure, size and sensor means are offset from population
    base values by ``separation`` (touch) or ``inertial_separation``
    (sensors) noise standard deviations times a standard normal draw, so
    two users differ by about ``separation * sqrt(2)`` sigma per dimension.
    """
    inertial_separation = separation if inertial_separation is None else inertial_separation
    floor = 1e-8
    kinds = {}
    for kind, n, (lo, hi), share in (
        ("slide", slide_states, (20, 40), 1.0 - tap_share),
        ("tap", tap_states, (4, 12), tap_share),
    ):
        if share <= 0:
            continue
        frac = (np.arange(n) + 0.5) / n
        if kind == "slide":
            start = np.array([0.25, 0.65]) + rng.uniform(-0.05, 0.05, 2)
            end = np.array([0.75, 0.35]) + rng.uniform(-0.05, 0.05, 2)
            bulge = 0.05 * rng.standard_normal()
            xy = start + np.outer(frac, end - start)
            xy[:, 1] += bulge * np.sin(np.pi * frac)
            xy_var = (0.004 ** 2, 0.004 ** 2)
        else:
            xy = np.tile(rng.uniform(0.2, 0.8, 2), (n, 1))
            xy_var = (1e-7, 1e-7)
        p = 0.5 + 0.05 * np.sin(np.pi * frac) + separation * _NOISE["pressure"] * rng.standard_normal(n)
        s = 0.3 + 0.03 * np.sin(np.pi * frac) + separation * _NOISE["size"] * rng.standard_normal(n)
        touch_means = np.column_stack([xy, np.clip(p, 0.2, 0.8), np.clip(s, 0.15, 0.6)])
        touch_var = np.tile([*xy_var, _NOISE["pressure"] ** 2, _NOISE["size"] ** 2], (n, 1))
        stay = 1.0 - 1.0 / ((hi + lo) / (2.0 * n))
        loops = np.clip(stay + 0.04 * rng.standard_normal(n), 0.3, 0.97)
        models = {"touch": make_model(touch_means, touch_var, loops, var_floor=floor)}
        if inertial:
            vib_base = np.array([0.0, 9.81, 0.0]) + np.outer(np.sin(np.pi * frac), [0.2, 0.0, -0.2])
            vib = vib_base + inertial_separation * _NOISE["vibration"] * rng.standard_normal((n, 3))
            rot = inertial_separation * _NOISE["rotation"] * rng.standard_normal((n, 3))
            models["vibration"] = make_model(vib, np.full((n, 3), _NOISE["vibration"] ** 2), loops, var_floor=floor)
            models["rotation"] = make_model(rot, np.full((n, 3), _NOISE["rotation"] ** 2), loops, var_floor=floor)
        kinds[kind] = KindSpec(models, lo, hi, share)
    return SyntheticUserSpec(user, kinds, *screen)


def random_population(n_users: int, seed=None, **kwargs) -> list[SyntheticUserSpec]:
    root = np.random.SeedSequence(seed)
    return [random_user_spec(f"u{i:02d}", np.random.default_rng(child), **kwargs)
            for i, child in enumerate(root.spawn(n_users))]
