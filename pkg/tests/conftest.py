"""Shared fixtures and independent reference implementations for the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from hmmauth.config import HmmConfig, RunConfig
from hmmauth.hmm import make_model


# -- brute-force HMM oracles ----------------------------------------------------


def gauss_logpdf(x, mean, var):
    """Scalar-loop diagonal Gaussian log-density (no vectorisation on purpose)."""
    total = 0.0
    for xi, mi, vi in zip(x, mean, var):
        total += -0.5 * (math.log(2 * math.pi * vi) + (xi - mi) ** 2 / vi)
    return total


def emission_logpdf(model, state, x):
    terms = [math.log(model.weights[state, m]) + gauss_logpdf(x, model.means[state, m], model.variances[state, m])
             for m in range(model.n_mix) if model.weights[state, m] > 0]
    top = max(terms)
    return top + math.log(sum(math.exp(t - top) for t in terms))


def all_paths(n_states, T):
    """Every state path that starts in state 0 and only stays or steps by one."""
    for steps in itertools.product((0, 1), repeat=T - 1):
        path = [0]
        for s in steps:
            path.append(path[-1] + s)
        if path[-1] < n_states:
            yield path


def path_logprob(model, path, X):
    lp = emission_logpdf(model, path[0], X[0])
    for t in range(1, len(path)):
        a = model.A[path[t - 1], path[t]]
        if a == 0:
            return -math.inf
        lp += math.log(a) + emission_logpdf(model, path[t], X[t])
    return lp


def brute_forward(model, X):
    lps = [path_logprob(model, p, X) for p in all_paths(model.n_states, len(X))]
    lps = [v for v in lps if v > -math.inf]
    top = max(lps)
    return top + math.log(sum(math.exp(v - top) for v in lps))


def brute_viterbi(model, X):
    best, best_path = -math.inf, None
    for p in all_paths(model.n_states, len(X)):
        v = path_logprob(model, p, X)
        if v > best:
            best, best_path = v, p
    return best, best_path


def random_model(rng, n_states, n_mix, dim, var_floor=1e-4):
    means = rng.normal(0, 2, (n_states, n_mix, dim))
    variances = rng.uniform(0.2, 2.0, (n_states, n_mix, dim))
    loops = rng.uniform(0.05, 0.95, n_states)
    weights = rng.dirichlet(np.ones(n_mix), n_states)
    return make_model(means, variances, loops, weights, var_floor)


# -- configs ------------------------------------------------------------------------


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_config(seed=0, **eval_kw) -> RunConfig:
    """A reduced model grid so end-to-end tests stay fast."""
    hmm = HmmConfig(slide_states=(3, 4), tap_states=(2,), mixtures=(1,), max_iter=30)
    cfg = RunConfig(seed=seed, hmm=hmm)
    if eval_kw:
        cfg = cfg.model_copy(update={"evaluation": cfg.evaluation.model_copy(update=eval_kw)})
    return cfg


@pytest.fixture(scope="session")
def population():
    """Three synthetic users, preprocessed, plus the config they were built with."""
    from hmmauth.ingest import parse_log, serialize_log
    from hmmauth.preprocess import process_log
    from hmmauth.synth import random_population, sample_population

    cfg = small_config()
    specs = random_population(3, seed=21)
    corpus = sample_population(specs, 200, seed=22)
    gestures = {u: process_log(parse_log(serialize_log(log)), cfg.preprocess)
                for u, log in corpus.logs.items()}
    return cfg, specs, gestures


@pytest.fixture(scope="session")
def owner_template(population):
    from hmmauth.template import enroll

    cfg, _, gestures = population
    train = [g for g in gestures["u00"] if g.session in (1, 2)]
    return enroll(train, cfg, seed=0)
