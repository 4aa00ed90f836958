"""Left-right, no-skip HMMs with diagonal-Gaussian mixture emissions.

All recursions run in log space over padded batches. The transition matrix
only ever has a self-loop and an advance entry per row, so the forward,
backward and Viterbi steps combine exactly two predecessors instead of a
full N x N reduction.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.cluster.vq import kmeans2

from .errors import NumericalError

logger = logging.getLogger(__name__)

MODEL_VERSION = 1
LOG_2PI = np.log(2.0 * np.pi)
COLLAPSE_WEIGHT = 1e-6


@dataclass(frozen=True)
class HmmModel:
    """Left-right GMM-HMM.

    Attributes:
        pi: (N,) initial distribution, always (1, 0, ..., 0).
        A: (N, N) transition matrix with non-zeros only on the diagonal and
            the first super-diagonal.
        weights: (N, M) mixture weights.
        means: (N, M, D) component means.
        variances: (N, M, D) diagonal covariances, each >= ``var_floor``.
    """

    pi: np.ndarray
    A: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    var_floor: float = 1e-4
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("pi", "A", "weights", "means", "variances"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_mix(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    @property
    def self_loop(self) -> np.ndarray:
        return np.diag(self.A)

    @property
    def advance(self) -> np.ndarray:
        return np.append(np.diag(self.A, 1), 0.0)

    def check(self, atol: float = 1e-9) -> None:
        """Raise ``ValueError`` if any structural invariant is violated."""
        n, m, d = self.n_states, self.n_mix, self.dim
        if self.pi.shape != (n,) or self.A.shape != (n, n):
            raise ValueError("pi/A shape mismatch")
        if self.weights.shape != (n, m) or self.variances.shape != (n, m, d):
            raise ValueError("emission shape mismatch")
        expected_pi = np.zeros(n)
        expected_pi[0] = 1.0
        if not np.array_equal(self.pi, expected_pi):
            raise ValueError("pi must start in the first state")
        allowed = np.eye(n, dtype=bool) | np.eye(n, k=1, dtype=bool)
        if np.any(self.A[~allowed] != 0.0):
            raise ValueError("transition matrix has entries outside the left-right band")
        if np.any(self.A < 0) or not np.allclose(self.A.sum(axis=1), 1.0, atol=atol, rtol=0):
            raise ValueError("transition rows must be stochastic")
        if self.A[-1, -1] != 1.0:
            raise ValueError("last state must be absorbing")
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(axis=1), 1.0, atol=atol, rtol=0):
            raise ValueError("mixture weights must sum to one")
        if self.var_floor <= 0 or np.any(self.variances < self.var_floor):
            raise ValueError("variance below floor")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.variances))):
            raise ValueError("non-finite emission parameters")

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "N": self.n_states,
            "M": self.n_mix,
            "D": self.dim,
            "pi": self.pi.tolist(),
            "A": self.A.tolist(),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "var_floor": self.var_floor,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HmmModel":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        model = cls(
            pi=d["pi"], A=d["A"], weights=d["weights"], means=d["means"],
            variances=d["variances"], var_floor=d["var_floor"], meta=dict(d.get("meta", {})),
        )
        n, m, dim = d["N"], d["M"], d["D"]
        if model.means.shape != (n, m, dim):
            raise ValueError("declared N/M/D disagree with parameter shapes")
        model.check()
        return model


@dataclass(frozen=True)
class DecodeResult:
    log_likelihood: float
    path: np.ndarray | None
    occupancy: np.ndarray | None


def left_right_transitions(self_loops) -> np.ndarray:
    """Build a no-skip transition matrix from per-state self-loop probabilities.

    The last state is always absorbing, so ``self_loops`` may omit it.
    """
    p = np.asarray(self_loops, dtype=float)
    n = len(p)
    A = np.zeros((n, n))
    for i in range(n - 1):
        A[i, i] = p[i]
        A[i, i + 1] = 1.0 - p[i]
    A[-1, -1] = 1.0
    return A


def make_model(means, variances, self_loops=None, weights=None, var_floor: float = 1e-4) -> HmmModel:
    """Convenience constructor; ``means`` is (N, M, D) or (N, D) for M = 1."""
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if means.ndim == 2:
        means = means[:, None, :]
    if variances.ndim == 2:
        variances = variances[:, None, :]
    variances = np.broadcast_to(variances, means.shape).copy()
    n, m, _ = means.shape
    if self_loops is None:
        self_loops = np.full(n, 0.5)
    self_loops = np.asarray(self_loops, dtype=float)
    if len(self_loops) == n - 1:
        self_loops = np.append(self_loops, 1.0)
    if weights is None:
        weights = np.full((n, m), 1.0 / m)
    pi = np.zeros(n)
    pi[0] = 1.0
    model = HmmModel(pi, left_right_transitions(self_loops), weights, means,
                     np.maximum(variances, var_floor), var_floor)
    model.check()
    return model


# -- batching helpers -------------------------------------------------------


def as_frames(seq) -> np.ndarray:
    frames = getattr(seq, "frames", seq)
    frames = np.asarray(frames, dtype=float)
    if frames.ndim == 1:
        frames = frames[:, None]
    return frames


def _pad(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    B, T, D = len(seqs), int(lengths.max()), seqs[0].shape[1]
    X = np.zeros((B, T, D))
    for b, s in enumerate(seqs):
        X[b, : len(s)] = s
    mask = np.arange(T)[None, :] < lengths[:, None]
    return X, mask, lengths


def _check_dims(model: HmmModel, seqs: list[np.ndarray]) -> None:
    for s in seqs:
        if s.shape[1] != model.dim:
            raise ValueError(f"observation dimension {s.shape[1]} != model dimension {model.dim}")
        if len(s) < 1:
            raise ValueError("empty observation sequence")


@njit(cache=True)
def _lse_rows(a):
    # log-sum-exp over the last axis of a 2-D array
    R, K = a.shape
    out = np.empty(R)
    for r in range(R):
        peak = -np.inf
        for k in range(K):
            if a[r, k] > peak:
                peak = a[r, k]
        if peak == -np.inf:
            out[r] = -np.inf
            continue
        acc = 0.0
        for k in range(K):
            acc += np.exp(a[r, k] - peak)
        out[r] = peak + np.log(acc)
    return out


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    if axis not in (-1, a.ndim - 1):
        raise ValueError("only the last axis is supported")
    flat = np.ascontiguousarray(a).reshape(-1, a.shape[-1])
    return _lse_rows(flat).reshape(a.shape[:-1])


def _component_logpdf(model: HmmModel, X: np.ndarray) -> np.ndarray:
    """log(w_nm * N(x | mu_nm, var_nm)) for all frames: shape X.shape[:-1] + (N, M)."""
    N, M, D = model.means.shape
    prec = (1.0 / model.variances).reshape(N * M, D)
    mu = model.means.reshape(N * M, D)
    flat = X.reshape(-1, D)
    quad = (flat * flat) @ prec.T - 2.0 * flat @ (mu * prec).T + np.sum(mu * mu * prec, axis=1)
    norm = np.sum(np.log(model.variances), axis=-1).reshape(N * M) + D * LOG_2PI
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights).reshape(N * M)
    out = logw - 0.5 * (np.maximum(quad, 0.0) + norm)
    return out.reshape(X.shape[:-1] + (N, M))


def _log_transitions(model: HmmModel) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore"):
        return np.log(model.self_loop), np.log(model.advance)


@njit(cache=True)
def _logaddexp(a: float, b: float) -> float:
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@njit(cache=True)
def _forward(logb, lengths, log_self, log_adv):
    B, T, N = logb.shape
    alpha = np.empty((B, T, N))
    for b in range(B):
        alpha[b, 0, 0] = logb[b, 0, 0]
        for j in range(1, N):
            alpha[b, 0, j] = -np.inf
        for t in range(1, T):
            if t >= lengths[b]:
                alpha[b, t] = alpha[b, t - 1]
                continue
            for j in range(N):
                v = alpha[b, t - 1, j] + log_self[j]
                if j > 0:
                    v = _logaddexp(v, alpha[b, t - 1, j - 1] + log_adv[j - 1])
                alpha[b, t, j] = v + logb[b, t, j]
    return alpha


@njit(cache=True)
def _backward(logb, lengths, log_self, log_adv):
    B, T, N = logb.shape
    beta = np.zeros((B, T, N))
    for b in range(B):
        for t in range(lengths[b] - 2, -1, -1):
            for j in range(N):
                v = log_self[j] + logb[b, t + 1, j] + beta[b, t + 1, j]
                if j < N - 1:
                    v = _logaddexp(v, log_adv[j] + logb[b, t + 1, j + 1] + beta[b, t + 1, j + 1])
                beta[b, t, j] = v
    return beta


def _batch_loglik(model: HmmModel, seqs: list[np.ndarray]) -> np.ndarray:
    X, mask, lengths = _pad(seqs)
    logb = _logsumexp(_component_logpdf(model, X), axis=-1)
    alpha = _forward(logb, lengths, *_log_transitions(model))
    return _logsumexp(alpha[:, -1], axis=-1)


def forward_batch(model: HmmModel, sequences) -> np.ndarray:
    """Marginal log-likelihood log P(seq | model) for each sequence."""
    seqs = [as_frames(s) for s in sequences]
    _check_dims(model, seqs)
    return _batch_loglik(model, seqs)


def forward_log_likelihood(model: HmmModel, seq) -> float:
    return float(forward_batch(model, [seq])[0])


def viterbi_batch(model: HmmModel, sequences) -> list[DecodeResult]:
    """Best left-right path and its joint log-probability for each sequence.

    Ties between staying and advancing resolve to staying; ties among end
    states resolve to the lowest state index.
    """
    seqs = [as_frames(s) for s in sequences]
    _check_dims(model, seqs)
    X, mask, lengths = _pad(seqs)
    logb = _logsumexp(_component_logpdf(model, X), axis=-1)
    log_self, log_adv = _log_transitions(model)
    B, T, N = logb.shape
    delta = np.full((B, N), -np.inf)
    delta[:, 0] = logb[:, 0, 0]
    advanced = np.zeros((B, T, N), dtype=bool)
    moved = np.full((B, N), -np.inf)
    for t in range(1, T):
        stay = delta + log_self
        moved[:, 1:] = delta[:, :-1] + log_adv[:-1]
        adv = moved > stay
        cur = np.where(adv, moved, stay) + logb[:, t]
        live = mask[:, t, None]
        advanced[:, t] = adv & live
        delta = np.where(live, cur, delta)
    state = np.argmax(delta, axis=1)
    score = delta[np.arange(B), state]
    paths = np.zeros((B, T), dtype=int)
    rows = np.arange(B)
    for t in range(T - 1, -1, -1):
        paths[:, t] = state
        step = advanced[rows, t, state] & (t < lengths)
        state = state - step
    results = []
    for b in range(B):
        path = paths[b, : lengths[b]].copy()
        occ = np.bincount(path, minlength=N) / lengths[b]
        results.append(DecodeResult(float(score[b]), path, occ))
    return results


def viterbi(model: HmmModel, seq) -> DecodeResult:
    return viterbi_batch(model, [seq])[0]


# -- training -----------------------------------------------------------------


def _floored_var(x: np.ndarray, floor: float) -> np.ndarray:
    return np.maximum(x.var(axis=0), floor)


def init_model(sequences, n_states: int, n_mix: int, var_floor: float = 1e-4,
               seed=None) -> HmmModel:
    """Uniform temporal segmentation followed by per-state k-means.

    Sequences shorter than ``n_states`` are ignored.

    Raises:
        ValueError: no sequence is long enough.
    """
    seqs = [as_frames(s) for s in sequences]
    if not seqs:
        raise ValueError("empty training set")
    seqs = [s for s in seqs if len(s) >= n_states]
    if not seqs:
        raise ValueError(f"no training sequence has at least {n_states} frames")
    rng = np.random.default_rng(seed)
    D = seqs[0].shape[1]
    chunks = [[] for _ in range(n_states)]
    for s in seqs:
        for i, part in enumerate(np.array_split(s, n_states)):
            chunks[i].append(part)
    weights = np.zeros((n_states, n_mix))
    means = np.zeros((n_states, n_mix, D))
    variances = np.zeros((n_states, n_mix, D))
    for i in range(n_states):
        pooled = np.concatenate(chunks[i])
        state_var = _floored_var(pooled, var_floor)
        if n_mix == 1:
            weights[i, 0] = 1.0
            means[i, 0] = pooled.mean(axis=0)
            variances[i, 0] = state_var
            continue
        k = min(n_mix, len(pooled))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centroids, labels = kmeans2(pooled, k, minit="++", seed=rng)
        for m in range(n_mix):
            members = pooled[labels == m] if m < k else pooled[:0]
            if len(members) == 0:
                means[i, m] = pooled[rng.integers(len(pooled))]
                variances[i, m] = state_var
                weights[i, m] = 1.0 / len(pooled)
            else:
                means[i, m] = members.mean(axis=0)
                variances[i, m] = _floored_var(members, var_floor) if len(members) > 1 else state_var
                weights[i, m] = len(members)
        weights[i] /= weights[i].sum()
    return make_model(means, variances, np.full(n_states, 0.5), weights, var_floor)


@dataclass
class _Stats:
    loglik: float
    logb: np.ndarray
    gamma: np.ndarray
    occ: np.ndarray
    first: np.ndarray
    second: np.ndarray
    stay: np.ndarray
    move: np.ndarray


@njit(cache=True)
def _accumulate(comp, X, lengths, log_self, log_adv, alpha, beta, logb, ll):
    B, T, N, M = comp.shape
    D = X.shape[2]
    gamma = np.zeros((B, T, N))
    occ = np.zeros((N, M))
    first = np.zeros((N, M, D))
    second = np.zeros((N, M, D))
    stay = np.zeros(N)
    move = np.zeros(N)
    for b in range(B):
        L = lengths[b]
        for t in range(L):
            for j in range(N):
                g = np.exp(alpha[b, t, j] + beta[b, t, j] - ll[b])
                gamma[b, t, j] = g
                if g == 0.0:
                    continue
                for m in range(M):
                    r = g * np.exp(comp[b, t, j, m] - logb[b, t, j])
                    occ[j, m] += r
                    for d in range(D):
                        x = X[b, t, d]
                        first[j, m, d] += r * x
                        second[j, m, d] += r * x * x
                if t + 1 < L:
                    nxt = logb[b, t + 1, j] + beta[b, t + 1, j]
                    stay[j] += np.exp(alpha[b, t, j] + log_self[j] + nxt - ll[b])
                    if j < N - 1:
                        nxt1 = logb[b, t + 1, j + 1] + beta[b, t + 1, j + 1]
                        move[j] += np.exp(alpha[b, t, j] + log_adv[j] + nxt1 - ll[b])
    return gamma, occ, first, second, stay, move


def _e_step(model: HmmModel, X: np.ndarray, mask: np.ndarray) -> _Stats:
    comp = _component_logpdf(model, X)
    logb = _logsumexp(comp, axis=-1)
    logb = np.where(mask[:, :, None], logb, 0.0)
    log_self, log_adv = _log_transitions(model)
    lengths = mask.sum(axis=1)
    alpha = _forward(logb, lengths, log_self, log_adv)
    beta = _backward(logb, lengths, log_self, log_adv)
    ll = _logsumexp(alpha[:, -1], axis=-1)
    if not np.all(np.isfinite(ll)):
        raise NumericalError("non-finite sequence likelihood in E-step")
    gamma, occ, first, second, stay, move = _accumulate(
        comp, X, lengths, log_self, log_adv, alpha, beta, logb, ll)
    return _Stats(float(ll.sum()), logb, gamma, occ, first, second, stay, move)


def _m_step(model: HmmModel, st: _Stats) -> HmmModel:
    floor = model.var_floor
    occ = st.occ
    total = occ.sum(axis=1, keepdims=True)
    weights = np.where(total > 0, occ / np.where(total > 0, total, 1.0), model.weights)
    safe = np.where(occ > 0, occ, 1.0)[..., None]
    means = np.where(occ[..., None] > 0, st.first / safe, model.means)
    var = st.second / safe - means * means
    variances = np.where(occ[..., None] > 0, np.maximum(var, floor), model.variances)
    denom = st.stay + st.move
    self_loops = np.where(denom > 0, st.stay / np.where(denom > 0, denom, 1.0), model.self_loop)
    self_loops[-1] = 1.0
    return HmmModel(model.pi, left_right_transitions(self_loops), weights, means,
                    variances, floor, dict(model.meta))


def _rescue_collapsed(model: HmmModel, st: _Stats, X: np.ndarray, mask: np.ndarray) -> HmmModel | None:
    """Re-seed near-empty mixture components at their state's worst-fit frame."""
    collapsed = np.argwhere(model.weights < COLLAPSE_WEIGHT)
    if model.n_mix == 1 or len(collapsed) == 0:
        return None
    weights = np.array(model.weights)
    means = np.array(model.means)
    variances = np.array(model.variances)
    frames = X[mask]
    gamma = st.gamma[mask]
    logb = st.logb[mask]
    for n, m in collapsed:
        owned = gamma[:, n] >= 0.5
        if owned.any():
            idx = np.flatnonzero(owned)[np.argmin(logb[owned, n])]
        else:
            idx = int(np.argmax(gamma[:, n]))
        donor = int(np.argmax(weights[n]))
        share = weights[n, donor] / 2.0
        weights[n, donor] -= share
        weights[n, m] = share
        means[n, m] = frames[idx]
        variances[n, m] = variances[n, donor]
    return HmmModel(model.pi, model.A, weights, means, variances, model.var_floor, dict(model.meta))


def _fit(init: HmmModel, seqs: list[np.ndarray], tol: float, max_iter: int) -> tuple[HmmModel, list[float]]:
    X, mask, _ = _pad(seqs)
    model = init
    st = _e_step(model, X, mask)
    history = [st.loglik]
    for _ in range(max_iter):
        candidate = _m_step(model, st)
        try:
            cand_st = _e_step(candidate, X, mask)
        except NumericalError:
            break
        rescued = _rescue_collapsed(candidate, cand_st, X, mask)
        if rescued is not None:
            try:
                resc_st = _e_step(rescued, X, mask)
                # the rescue is a heuristic jump: keep it only if it cannot break monotonicity
                if resc_st.loglik >= history[-1]:
                    candidate, cand_st = rescued, resc_st
            except NumericalError:
                pass
        prev = history[-1]
        model, st = candidate, cand_st
        history.append(st.loglik)
        if st.loglik - prev < tol * abs(prev):
            break
    return model, history


def baum_welch(sequences, n_states: int, n_mix: int = 1, tol: float = 1e-4, max_iter: int = 100,
               var_floor: float = 1e-4, seed=None, init: HmmModel | None = None) -> tuple[HmmModel, list[float]]:
    """Multi-sequence EM on the left-right structure.

    History entry ``k`` is the total training log-likelihood of the model
    after ``k`` re-estimations; the returned model is the one scored by the
    final entry.

    Raises:
        ValueError: no usable training sequence.
        NumericalError: the initial model produces a non-finite likelihood.
    """
    seqs = [as_frames(s) for s in sequences]
    if init is None:
        init = init_model(seqs, n_states, n_mix, var_floor, seed)
    seqs = [s for s in seqs if len(s) >= n_states]
    _check_dims(init, seqs)
    model, history = _fit(init, seqs, tol, max_iter)
    model.check()
    return model, history


# -- model selection ------------------------------------------------------------


@dataclass
class Selection:
    n_states: int
    n_mix: int
    model: HmmModel
    scores: dict = field(default_factory=dict)  # (N, M) -> mean held-out per-frame loglik
    fallback: bool = False
    history: list = field(default_factory=list)


def fold_assignment(n: int, folds: int, seed=None) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and split into ``folds`` near-equal index groups."""
    rng = np.random.default_rng(seed)
    return [np.sort(f) for f in np.array_split(rng.permutation(n), folds)]


def _child_seed(seed, *keys) -> np.random.SeedSequence:
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.SeedSequence(list(base.generate_state(2)) + [int(k) for k in keys])


def select_model(sequences, n_grid, m_grid, folds: int = 5, seed=0, tol: float = 1e-4,
                 max_iter: int = 100, var_floor: float = 1e-4) -> Selection:
    """Pick (N, M) by k-fold cross-validated held-out per-frame log-likelihood.

    Ties go to the smallest N, then the smallest M. The winner is retrained
    on every sequence. With fewer sequences than folds, the smallest grid
    point is trained on everything and ``fallback`` is set.
    """
    seqs = [as_frames(s) for s in sequences]
    if not seqs:
        raise ValueError("empty training set")
    grid = [(n, m) for n in sorted(set(n_grid)) for m in sorted(set(m_grid))]
    fold_idx = fold_assignment(len(seqs), folds, _child_seed(seed, 0))

    def train(data, n, m, s):
        return baum_welch(data, n, m, tol, max_iter, var_floor, seed=s)

    if len(seqs) < folds or len(grid) == 1:
        usable = [(n, m) for n, m in grid if any(len(s) >= n for s in seqs)]
        n, m = (usable or grid)[0]
        model, hist = train(seqs, n, m, _child_seed(seed, n, m, folds))
        return Selection(n, m, model, {}, fallback=len(seqs) < folds, history=hist)

    scores = {}
    for n, m in grid:
        fold_scores = []
        for f, held in enumerate(fold_idx):
            held_set = set(held.tolist())
            train_set = [s for i, s in enumerate(seqs) if i not in held_set]
            test_set = [seqs[i] for i in held]
            try:
                model, _ = train(train_set, n, m, _child_seed(seed, n, m, f))
                ll = forward_batch(model, test_set)
            except (ValueError, NumericalError) as exc:
                logger.debug("candidate N=%d M=%d fold %d failed: %s", n, m, f, exc)
                fold_scores.append(-np.inf)
                continue
            lengths = np.array([len(s) for s in test_set])
            fold_scores.append(float(np.mean(ll / lengths)))
        scores[(n, m)] = float(np.mean(fold_scores))

    best = None
    for key in grid:
        if best is None or scores[key] > scores[best]:
            best = key
    if not np.isfinite(scores[best]):
        best = grid[0]
    n, m = best
    model, hist = train(seqs, n, m, _child_seed(seed, n, m, folds))
    return Selection(n, m, model, scores, history=hist)
