import json

import numpy as np
import pytest

from hmmauth.config import PreprocessConfig
from hmmauth.errors import SpecError
from hmmauth.hmm import make_model
from hmmauth.ingest import parse_log, segment, serialize_log
from hmmauth.preprocess import process_log
from hmmauth.synth import (
    KindSpec, SyntheticUserSpec, load_spec, random_population, sample_population, sample_sequence,
    spec_from_dict, spec_to_dict,
)


def test_degenerate_variance_returns_mean():
    model = make_model([[1.0, -2.0]], [[1e-10, 1e-10]], var_floor=1e-10)
    frames = sample_sequence(model, 50, seed=0).frames
    np.testing.assert_allclose(frames, np.tile([1.0, -2.0], (50, 1)), atol=1e-3)


def test_law_of_large_numbers():
    mean, var = np.array([0.3, -1.2, 4.0]), np.array([0.5, 2.0, 0.1])
    model = make_model([mean], [var])
    frames = sample_sequence(model, 10_000, seed=1).frames
    assert np.all(np.abs(frames.mean(axis=0) - mean) <= 3 * np.sqrt(var) / 100)


def test_same_seed_same_sequence():
    model = make_model([[0.0], [1.0]], [[1.0], [1.0]], [0.7], weights=None)
    a = sample_sequence(model, 30, seed=5).frames
    b = sample_sequence(model, 30, seed=5).frames
    np.testing.assert_array_equal(a, b)


def test_paths_are_left_right():
    model = make_model([[0.0], [100.0], [200.0]], [[1e-6]] * 3, [0.6, 0.6], var_floor=1e-6)
    states = np.round(sample_sequence(model, 80, seed=2).frames[:, 0] / 100).astype(int)
    assert states[0] == 0
    assert np.all(np.diff(states) >= 0) and np.all(np.diff(states) <= 1)


def _one_user(availability=None, inertial=True):
    spec = random_population(1, seed=3, inertial=inertial)[0]
    if availability is not None:
        kinds = {k: KindSpec(ks.models, ks.min_len, ks.max_len, ks.proportion, availability)
                 for k, ks in spec.kinds.items()}
        spec = SyntheticUserSpec(spec.user, kinds, spec.screen_w, spec.screen_h)
    return spec


def test_ten_gestures_ten_runs():
    corpus = sample_population([_one_user()], 10, seed=0)
    log = corpus.logs["u00"]
    assert sum(s.phase == "down" for s in log.touch) == 10
    assert len(segment(log)) == 10


def test_zero_availability_gives_touch_only():
    corpus = sample_population([_one_user({"vibration": 0.0, "rotation": 0.0})], 20, seed=0)
    assert corpus.logs["u00"].inertial == ()
    text = serialize_log(corpus.logs["u00"]).decode()
    assert '"accel"' not in text and '"gyro"' not in text


def test_round_trip_recovers_sampled_sequences():
    spec = _one_user()
    corpus = sample_population([spec], 30, seed=4)
    log = parse_log(serialize_log(corpus.logs["u00"]))
    gestures = process_log(log, PreprocessConfig(scale_normalize=False))
    sampled = corpus.sampled["u00"]
    assert len(gestures) == len(sampled)
    for g, s in zip(gestures, sampled):
        for ch in ("vibration", "rotation"):
            np.testing.assert_allclose(g.sequences[ch].frames, s["frames"][ch], atol=1e-6)
        # touch: pressure/size are untouched by normalization
        np.testing.assert_allclose(g.sequences["touch"].frames[:, 2:], s["frames"]["touch"][:, 2:], atol=1e-6)
        if g.kind == "tap":
            xy = s["frames"]["touch"][:, :2]
            np.testing.assert_allclose(g.sequences["touch"].frames[:, :2], xy - xy[0], atol=1e-6)


def test_clamp_rate_small_and_sessions_labelled():
    corpus = sample_population(random_population(3, seed=1), 100, seed=2)
    assert corpus.clamp_rate < 0.01
    sessions = {s.session for s in corpus.logs["u01"].touch}
    assert sessions == {1, 2, 3, 4, 5}


def test_population_is_seed_deterministic(tmp_path):
    specs = random_population(2, seed=7)
    a = sample_population(specs, 15, seed=9).write(tmp_path / "a")
    b = sample_population(specs, 15, seed=9).write(tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_spec_round_trip(tmp_path):
    specs = random_population(2, seed=0)
    doc = spec_to_dict(specs, gestures_per_user=40)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(doc))
    again, settings = load_spec(path)
    assert settings == {"gestures_per_user": 40}
    assert [s.user for s in again] == ["u00", "u01"]
    np.testing.assert_array_equal(again[1].kinds["slide"].models["touch"].means,
                                  specs[1].kinds["slide"].models["touch"].means)


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(version=2),
    lambda d: d["users"][0]["kinds"]["slide"].update(length=[30, 10]),
    lambda d: d["users"][0]["kinds"]["slide"]["channels"].pop("touch"),
    lambda d: d["users"][0]["kinds"]["slide"]["channels"]["touch"]["model"]["A"][0].__setitem__(0, 2.0),
    lambda d: d["users"][0].pop("kinds"),
])
def test_invalid_specs_rejected(mutate):
    doc = spec_to_dict(random_population(1, seed=0))
    mutate(doc)
    with pytest.raises(SpecError):
        spec_from_dict(doc)


def test_well_separated_population_is_identifiable():
    from conftest import small_config
    from hmmauth.evaluation import protocol_run

    cfg = small_config()
    # separation 3.6 puts two users' state means about 5 noise sigmas apart
    corpus = sample_population(random_population(6, seed=31, separation=3.6), 120, seed=32)
    gestures = {u: process_log(log, cfg.preprocess) for u, log in corpus.logs.items()}
    result = protocol_run(gestures, cfg)
    for mode in result.summary:
        med = result.median_eer(mode)
        assert med[1] <= 0.05
        assert all(med[k] == 0.0 for k in med if k >= 15)
