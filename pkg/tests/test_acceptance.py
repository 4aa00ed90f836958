"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to watch the report lines
live; they are also echoed in the normal ``pytest -v`` output.
"""

from __future__ import annotations

import inspect
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import brute_forward, brute_viterbi, random_model
from hmmauth import evaluation as evaluation_mod
from hmmauth.config import RunConfig
from hmmauth.engine import AuthSession, calibrate_threshold
from hmmauth.errors import MixedSubjectsError
from hmmauth.evaluation import (
    enroll_population, eer, far_at_zero_frr, far_frr, fixed_rate_curves, frr_at_zero_far, protocol_run,
)
from hmmauth.hmm import baum_welch, forward_log_likelihood, make_model, viterbi
from hmmauth.preprocess import ObservationSequence, normalize_rotation, process_log
from hmmauth.synth import random_population, sample_population, sample_sequence
from hmmauth.template import enroll

K_SATURATED = 17


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[acceptance] criterion {number:2d} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return emit


# -- 1 ---------------------------------------------------------------------------


def test_c01_hmm_oracle_equivalence(report):
    start = time.perf_counter()
    cases, worst_fwd, worst_vit, path_mismatch = 0, 0.0, 0.0, 0
    for case in range(300):
        rng = np.random.default_rng(50_000 + case)
        n, m, d, T = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 7))
        model = random_model(rng, n, m, d)
        X = rng.normal(0, 2, (T, d))
        worst_fwd = max(worst_fwd, abs(forward_log_likelihood(model, X) - brute_forward(model, X)))
        best, path = brute_viterbi(model, X)
        res = viterbi(model, X)
        worst_vit = max(worst_vit, abs(res.log_likelihood - best))
        path_mismatch += res.path.tolist() != path
        cases += 1
    elapsed = time.perf_counter() - start
    ok = cases >= 200 and worst_fwd <= 1e-8 and worst_vit <= 1e-8 and path_mismatch == 0 and elapsed < 10
    report(1, "HMM oracle equivalence", ok,
           f"{cases} cases, max |fwd err| {worst_fwd:.1e}, max |vit err| {worst_vit:.1e}, "
           f"{path_mismatch} path mismatches, {elapsed:.1f} s")


# -- 2 ---------------------------------------------------------------------------


def test_c02_em_monotonicity(report):
    start = time.perf_counter()
    worst, runs = 0.0, 0
    for run in range(60):
        rng = np.random.default_rng(60_000 + run)
        n, m, d = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        if run % 2:
            truth = random_model(rng, n, m, d)
            seqs = [sample_sequence(truth, int(rng.integers(n, 40)), rng).frames for _ in range(20)]
        else:
            seqs = [rng.normal(size=(int(rng.integers(n, 40)), d)) for _ in range(20)]
        _, hist = baum_welch(seqs, n, m, tol=1e-9, max_iter=60, seed=run)
        worst = max(worst, float(np.max(-np.diff(hist), initial=0.0)))
        runs += 1
    elapsed = time.perf_counter() - start
    ok = runs >= 50 and worst <= 1e-8 and elapsed < 60
    report(2, "EM monotonicity", ok, f"{runs} runs, largest decrease {worst:.1e}, {elapsed:.1f} s")


# -- 3 ---------------------------------------------------------------------------


def test_c03_parameter_recovery(report):
    start = time.perf_counter()
    truth = make_model([[0.0], [5.0], [10.0]], [[0.25]] * 3, [0.94, 0.94])
    good, errors = 0, []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        seqs = [sample_sequence(truth, 50, rng).frames for _ in range(100)]
        assert sum(len(s) for s in seqs) >= 5000
        model, _ = baum_welch(seqs, 3, 1, seed=seed)
        err = float(np.max(np.abs(model.means[:, 0, 0] - [0.0, 5.0, 10.0])))
        errors.append(err)
        good += err <= 0.3
    elapsed = time.perf_counter() - start
    ok = good >= 18 and elapsed < 120
    report(3, "parameter recovery", ok,
           f"{good}/20 seeds within 0.3, worst error {max(errors):.3f}, {elapsed:.1f} s")


# -- 4 ---------------------------------------------------------------------------


def test_c04_rotation_invariance(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, cases = 0.0, 0
    for _ in range(600):
        T = int(rng.integers(2, 40))
        xy = np.cumsum(rng.normal(size=(T, 2)), axis=0)
        if math.hypot(*(xy[-1] - xy[0])) < 1e-2:
            xy[-1] += 1.0
        extra = rng.uniform(0, 1, (T, 2))
        base = normalize_rotation(ObservationSequence("touch", 50, np.column_stack([xy, extra]))).frames
        theta, scale, shift = rng.uniform(0, 2 * np.pi), math.exp(rng.uniform(-3, 3)), rng.normal(0, 100, 2)
        c, s = math.cos(theta), math.sin(theta)
        moved = scale * xy @ np.array([[c, -s], [s, c]]).T + shift
        out = normalize_rotation(ObservationSequence("touch", 50, np.column_stack([moved, extra]))).frames
        worst = max(worst, float(np.max(np.abs(out - base))))
        cases += 1
    elapsed = time.perf_counter() - start
    ok = cases >= 500 and worst <= 1e-9 and elapsed < 5
    report(4, "rotation invariance", ok, f"{cases} cases, max deviation {worst:.1e}, {elapsed:.2f} s")


# -- 5 ---------------------------------------------------------------------------


def _count(gen, imp, t):
    return sum(s >= t for s in imp) / len(imp), sum(s < t for s in gen) / len(gen)


def _sweep(gen, imp):
    pooled = sorted(set(gen) | set(imp))
    cands = [pooled[0] - 1] + [(a + b) / 2 for a, b in zip(pooled, pooled[1:])] + [pooled[-1] + 1]
    rates = [_count(gen, imp, t) for t in cands]
    gap = min(abs(f - r) for f, r in rates)
    e = next((f + r) / 2 for f, r in rates if abs(f - r) == gap)
    return e, min(f for f, r in rates if r == 0), min(r for f, r in rates if f == 0)


def test_c05_metric_oracles(report):
    start = time.perf_counter()
    mismatches, sets = 0, 0
    for case in range(150):
        rng = np.random.default_rng(70_000 + case)
        n_g, n_i = int(rng.integers(1, 80)), int(rng.integers(1, 80))
        if case % 2:
            gen, imp = list(rng.integers(0, 12, n_g) / 12), list(rng.integers(0, 12, n_i) / 12)
        else:
            gen, imp = list(rng.beta(4, 2, n_g)), list(rng.beta(2, 4, n_i))
        for t in np.linspace(-0.05, 1.05, 23):
            mismatches += far_frr(gen, imp, t) != _count(gen, imp, t)
        e, far0, frr0 = _sweep(gen, imp)
        mismatches += eer(gen, imp)[0] != e
        mismatches += far_at_zero_frr(gen, imp) != far0 or frr_at_zero_far(gen, imp) != frr0
        mismatches += fixed_rate_curves({1: gen}, {1: imp}, "far_at_zero_frr", [1]) != {1: far0}
        mismatches += fixed_rate_curves({1: gen}, {1: imp}, "frr_at_zero_far", [1]) != {1: frr0}
        sets += 1
    elapsed = time.perf_counter() - start
    ok = sets >= 100 and mismatches == 0 and elapsed < 10
    report(5, "metric oracles", ok, f"{sets} score sets, {mismatches} mismatches, {elapsed:.2f} s")


# -- 6 / 7 / 8: one seeded 10-user population, default configuration --------------


@pytest.fixture(scope="module")
def cohort():
    start = time.perf_counter()
    cfg = RunConfig(seed=0)
    specs = random_population(10, seed=2024, separation=1.0)
    synthetic = sample_population(specs, 150, seed=2025)
    corpus = {u: process_log(log, cfg.preprocess) for u, log in synthetic.logs.items()}
    templates, excluded = enroll_population(corpus, cfg)
    assert not excluded
    setup = time.perf_counter() - start
    return cfg, synthetic, corpus, templates, setup


def test_c06_curve_shape(report, cohort):
    cfg, _, corpus, templates, setup = cohort
    start = time.perf_counter()
    result = protocol_run(corpus, cfg, templates=templates)
    elapsed = setup + time.perf_counter() - start
    ok, parts = elapsed < 300, []
    for mode in cfg.evaluation.modes:
        med = result.median_eer(mode)
        ks = sorted(med)
        rises = [(a, b) for a, b in zip(ks, ks[1:]) if med[b] > med[a] + 0.02]
        ok &= 0.0 < med[1] < 0.3 and med[K_SATURATED] == 0.0 and not rises
        parts.append(f"{mode}: k=1 {med[1]:.3f}, k=17 {med[K_SATURATED]:.3f}, rises {len(rises)}")
    report(6, "EER vs window size shape", ok, "; ".join(parts) + f"; {elapsed:.0f} s")


def test_c07_multisensor_benefit(report, cohort):
    cfg, _, corpus, templates, setup = cohort
    start = time.perf_counter()
    full = protocol_run(corpus, cfg, templates=templates)
    touch = protocol_run(corpus, cfg, templates=templates, channels=("touch",))
    elapsed = setup + time.perf_counter() - start
    ok, parts = elapsed < 300, []
    for mode in cfg.evaluation.modes:
        a, b = full.median_eer(mode), touch.median_eer(mode)
        worse = [k for k in a if a[k] > b[k]]
        ok &= not worse and a[1] < b[1]
        parts.append(f"{mode}: k=1 {a[1]:.3f} vs touch-only {b[1]:.3f}, {len(worse)} k worse")
    report(7, "multi-sensor benefit", ok, "; ".join(parts) + f"; {elapsed:.0f} s")


def test_c08_missing_sensor_robustness(report, cohort):
    cfg, synthetic, _, templates, _ = cohort
    start = time.perf_counter()
    k = cfg.engine.k
    stripped = {}
    for user, log in synthetic.logs.items():
        gestures = process_log(log.without_inertial(), cfg.preprocess)
        stripped[user] = [g for g in gestures if g.session not in cfg.evaluation.train_sessions]
    errors, undecided_late, decisions = 0, 0, 0
    for owner, tmpl in templates.items():
        for user, stream in stripped.items():
            try:
                records = AuthSession(tmpl, 0.5, k).process(stream)
            except Exception:  # any error path counts as a failure of the criterion
                errors += 1
                continue
            for i, r in enumerate(records):
                decisions += r.decision is not None
                if r.decision is None or (i >= k - 1 and r.decision.verdict == "undecided"):
                    undecided_late += 1
    try:
        result = protocol_run(stripped, cfg, templates=templates)
        curves_ok = all(len(result.curves[m]) == len(templates) for m in cfg.evaluation.modes)
    except Exception:
        curves_ok = False
    elapsed = time.perf_counter() - start
    ok = errors == 0 and undecided_late == 0 and curves_ok and elapsed < 60
    report(8, "missing-sensor robustness", ok,
           f"{decisions} decisions, {errors} errors, {undecided_late} windows without verdict, {elapsed:.1f} s")


# -- 9 ---------------------------------------------------------------------------


def _hmmauth(*args):
    proc = subprocess.run([sys.executable, "-m", "hmmauth", *map(str, args)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_c09_determinism(report, tmp_path):
    corpus_dir = tmp_path / "corpus"
    sample_population(random_population(3, seed=8), 100, seed=9).write(corpus_dir)
    for run in ("a", "b"):
        _hmmauth("enroll", corpus_dir / "u00.jsonl", "--seed", 5, "--out", tmp_path / run / "template.json")
        _hmmauth("evaluate", corpus_dir, "--seed", 5, "--out", tmp_path / run / "eval")
    files = ["template.json"] + [f"eval/{p.name}" for p in sorted((tmp_path / "a" / "eval").iterdir())]
    differing = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = not differing and any(f.endswith(".csv") for f in files)
    report(9, "determinism", ok, f"{len(files)} artifacts compared, differing: {differing or 'none'}")


# -- 10 --------------------------------------------------------------------------


def test_c10_single_user_training(report, cohort, monkeypatch):
    cfg, _, corpus, templates, _ = cohort
    checks = {}
    checks["enroll takes one gesture stream"] = list(inspect.signature(enroll).parameters) == ["gestures", "cfg", "seed"]
    checks["calibration takes owner holdout only"] = (
        list(inspect.signature(calibrate_threshold).parameters) == ["template", "holdout", "target", "k"])

    try:
        enroll(corpus["u00"][:60] + corpus["u01"][:1], cfg)
        checks["enroll rejects a second subject"] = False
    except MixedSubjectsError:
        checks["enroll rejects a second subject"] = True
    try:
        calibrate_threshold(templates["u00"], corpus["u01"][:30], "balanced", 3)
        checks["calibration rejects a foreign holdout"] = False
    except MixedSubjectsError:
        checks["calibration rejects a foreign holdout"] = True

    seen = []
    real_enroll = evaluation_mod.enroll

    def spy(gestures, cfg=None, seed=None):
        seen.append(({g.label for g in gestures}, {g.session for g in gestures}))
        return real_enroll(gestures, cfg, seed)

    small = {u: corpus[u] for u in ("u00", "u01", "u02")}
    monkeypatch.setattr(evaluation_mod, "enroll", spy)
    enroll_population(small, cfg.model_copy(update={"hmm": cfg.hmm.model_copy(
        update={"slide_states": (3,), "tap_states": (2,), "mixtures": (1,)})}))
    train = set(cfg.evaluation.train_sessions)
    checks["protocol enrolls each user on own training data"] = (
        len(seen) == 3 and all(len(labels) == 1 and sessions <= train for labels, sessions in seen))

    failed = [name for name, passed in checks.items() if not passed]
    report(10, "single-user training", not failed, f"{len(checks)} checks, failed: {failed or 'none'}")
