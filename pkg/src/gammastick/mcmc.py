"""Gibbs sampler for the Gamma-Poisson factor model with the atom weights
integrated out by Monte Carlo.

The chain state holds the factor counts ``Z``, loadings ``Phi``, the round
indicator ``d_k`` of each atom and the scalars ``alpha``, ``c`` and ``mass``.
Atom weights ``g_k = E_k exp(-T_k)`` with ``E_k ~ Exp(c)`` and
``T_k ~ Gamma(d_k, alpha)`` never appear in the state: every conditional that
needs them averages over ``S`` simulated weights.

Simulated weights are built from parameter-free base draws,
``g = (E0 / c) * exp(-T0 / alpha)`` with ``E0 ~ Exp(1)`` and
``T0 ~ Gamma(d, 1)``, so that all candidates compared within one
conditional share the same random numbers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .errors import ChainError, DomainError, SamplingError
from .model import Corpus, Hyperpriors
from .numeric import SeededRng
from .vi import FitTrace

_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class McConfig:
    mc_samples: int = 1000
    grid_step_alpha: float = 0.05
    grid_step_c: float = 0.05
    tail_threshold: float = 1e-2
    burn_in: int = 100
    n_iters: int = 30
    seed: int = 0
    max_grid_points: int = 400
    max_round_candidates: int = 500
    adapt_atoms: bool = True
    hyper_prior: str = "flat"   # "flat" or "gamma" for alpha and c

    def __post_init__(self):
        if self.hyper_prior not in ("flat", "gamma"):
            raise DomainError("hyper_prior must be 'flat' or 'gamma'")
        if self.mc_samples < 1:
            raise DomainError("mc_samples must be >= 1")
        if not (self.grid_step_alpha > 0 and self.grid_step_c > 0):
            raise DomainError("grid steps must be positive")
        if not 0 < self.tail_threshold < 1:
            raise DomainError("tail_threshold must lie in (0, 1)")
        if self.burn_in < 0 or self.n_iters < 0:
            raise DomainError("burn_in and n_iters must be >= 0")


@dataclass
class ChainState:
    z: np.ndarray        # K x N integer counts
    loadings: np.ndarray  # V x K, columns on the simplex
    d: np.ndarray        # K round indicators, nondecreasing
    alpha: float
    c: float
    gamma_mass: float

    @property
    def n_atoms(self) -> int:
        return self.z.shape[0]

    def copy(self) -> "ChainState":
        return replace(self, z=self.z.copy(), loadings=self.loadings.copy(), d=self.d.copy())

    def check(self) -> None:
        if np.any(self.z < 0):
            raise DomainError("factor counts must be nonnegative")
        if self.d.size and (self.d.min() < 1 or np.any(np.diff(self.d) < 0)):
            raise DomainError("round indicators must be >= 1 and nondecreasing")
        if not (self.alpha > 0 and self.c > 0 and self.gamma_mass > 0):
            raise DomainError("alpha, c and gamma_mass must be positive")
        if self.loadings.shape[1] != self.n_atoms or self.d.size != self.n_atoms:
            raise DomainError("state dimensions disagree")


# ---------------------------------------------------------------------------
# Monte Carlo marginal likelihood of one atom's counts

def _log_mean_exp(x, axis=-1):
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    out = np.log(np.mean(np.exp(x - top), axis=axis)) + np.squeeze(top, axis=axis)
    return out


def _log_weights(e0, t0, alpha, c):
    return np.log(e0) - math.log(c) - t0 / alpha


def mc_marginal_loglik(z_col, round_index: int, alpha: float, c: float, S: int,
                       rng: SeededRng) -> float:
    """Log of ``mean_s prod_n Poisson(z_n | g_s)`` over ``S`` simulated weights."""
    if round_index < 1 or S < 1:
        raise DomainError("round must be >= 1 and S >= 1")
    z = np.asarray(z_col, dtype=float)
    e0 = rng.exponential(1.0, S)
    t0 = rng.gamma(round_index, 1.0, S)
    lg = _log_weights(e0, t0, alpha, c)
    ll = z.sum() * lg - z.size * np.exp(lg) - special.gammaln(z + 1.0).sum()
    return float(_log_mean_exp(ll))


def _row_logliks(totals, n_docs, lg):
    """``log mean_s exp(tot_k * lg_ks - N g_ks)`` per row, without the 1/z! part."""
    return _log_mean_exp(totals[:, None] * lg - n_docs * np.exp(lg), axis=1)


# ---------------------------------------------------------------------------
# round indicators

def _poisson_logsf(x: int, mean: float) -> float:
    # P(C > x) is the regularized lower incomplete gamma P(x + 1, mean)
    p = special.gammainc(x + 1, mean)
    return math.log(p) if p > 0 else -math.inf


def round_prior_logpmf(d: int, d_prev: int, run_prev: int, gamma_mass: float) -> float:
    """Log prior of ``d_k = d`` given the previous atom's round and run length.

    ``run_prev`` is the number of atoms among the first ``k - 1`` sharing
    ``d_prev``; the first atom uses ``d_prev = 1`` and ``run_prev = 0``.
    """
    if d < d_prev:
        return -math.inf
    sf_before = 0.0 if run_prev == 0 else _poisson_logsf(run_prev - 1, gamma_mass)
    if d == d_prev:
        return _poisson_logsf(run_prev, gamma_mass) - sf_before
    h = d - d_prev
    leave = run_prev * math.log(gamma_mass) - gamma_mass - math.lgamma(run_prev + 1) - sf_before
    nonempty = math.log(-math.expm1(-gamma_mass))
    return float(leave + nonempty - (h - 1) * gamma_mass)


def rounds_log_prior(d, gamma_mass: float) -> float:
    """Joint log prior of a nondecreasing round-indicator vector."""
    total = 0.0
    prev, run = 1, 0
    for dk in np.asarray(d, dtype=np.int64):
        total += round_prior_logpmf(int(dk), prev, run, gamma_mass)
        if not math.isfinite(total):
            return -math.inf
        run = run + 1 if dk == prev else 1
        prev = int(dk)
    return total


def _draw_from_logits(logits, rng: SeededRng) -> int:
    logits = np.asarray(logits, dtype=float)
    top = logits.max()
    if not math.isfinite(top):
        raise SamplingError("no candidate has positive posterior mass")
    cum = np.cumsum(np.exp(logits - top))
    return min(int(np.searchsorted(cum, rng.generator.random() * cum[-1], side="right")), cum.size - 1)


def _stop_index(values, threshold_log: float):
    """Index of the first value that drops below ``threshold * running max``."""
    running = -math.inf
    for i, val in enumerate(values):
        if math.isfinite(running) and val < running + threshold_log:
            return i
        running = max(running, val)
    return None


def sample_round_indicator(k: int, state: ChainState, config: McConfig, rng: SeededRng,
                           loglik=None) -> int:
    """Resample ``d_k`` from its conditional and return the new value.

    Candidates run upward from ``d_{k-1}``.  For the last atom they stop once
    the unnormalized posterior falls below ``tail_threshold`` times the
    largest value seen so far; for other atoms they end at ``d_{k+1}``.
    ``loglik`` overrides the Monte Carlo likelihood with a callable of ``d``.
    """
    K = state.n_atoms
    d = state.d.copy()
    lo = int(d[k - 1]) if k > 0 else 1
    hi = int(d[k + 1]) if k + 1 < K else lo + config.max_round_candidates
    threshold_log = math.log(config.tail_threshold)

    if loglik is None:
        row = state.z[k].astype(float)
        total, n = row.sum(), row.size
        S = config.mc_samples
        e0 = rng.exponential(1.0, S)
        t0 = rng.gamma(lo, 1.0, S)
        log_e = np.log(e0) - math.log(state.c)
        const = special.gammaln(row + 1.0).sum()

    values = []
    for cand in range(lo, hi + 1):
        if loglik is None:
            if cand > lo:
                t0 = t0 + rng.exponential(1.0, S)
            lg = log_e - t0 / state.alpha
            like = float(_log_mean_exp(total * lg - n * np.exp(lg))) - const
        else:
            like = float(loglik(cand))
        d[k] = cand
        values.append(rounds_log_prior(d, state.gamma_mass) + like)
        if k + 1 == K:
            stop = _stop_index(values, threshold_log)
            if stop is not None:
                values = values[:stop]
                break
    return lo + _draw_from_logits(values, rng)


# ---------------------------------------------------------------------------
# loadings

@dataclass
class Allocations:
    per_cell: np.ndarray   # nnz x K
    word_factor: np.ndarray  # V x K


def thin_counts(corpus: Corpus, state: ChainState, rng: SeededRng) -> Allocations:
    """Split every nonzero cell's count across factors by multinomial thinning."""
    K = state.n_atoms
    if corpus.nnz == 0:
        return Allocations(np.zeros((0, K), dtype=np.int64), np.zeros((corpus.vocab_size, K), dtype=np.int64))
    rates = state.loadings[corpus.words] * state.z[:, corpus.docs].T
    totals = rates.sum(axis=1)
    bad = np.flatnonzero(~(totals > 0))
    if bad.size:
        i = int(bad[0])
        raise SamplingError(f"zero rate at nonzero cell (word {corpus.words[i]}, doc {corpus.docs[i]})")
    probs = rates / totals[:, None]
    per_cell = rng.generator.multinomial(corpus.counts, probs)
    word_factor = np.zeros((corpus.vocab_size, K), dtype=np.int64)
    np.add.at(word_factor, corpus.words, per_cell)
    return Allocations(per_cell, word_factor)


def _dirichlet_columns(params: np.ndarray, rng: SeededRng) -> np.ndarray:
    g = np.maximum(rng.gamma(params, 1.0), _TINY)
    return g / g.sum(axis=0)


def sample_loadings(allocations, hyper: Hyperpriors, rng: SeededRng) -> np.ndarray:
    """Draw each loading column from ``Dirichlet(beta + d_{.k})``."""
    word_factor = getattr(allocations, "word_factor", allocations)
    return _dirichlet_columns(hyper.beta[:, None] + word_factor, rng)


# ---------------------------------------------------------------------------
# factor counts

class _DocIndex:
    def __init__(self, corpus: Corpus):
        starts = np.searchsorted(corpus.docs, np.arange(corpus.n_docs + 1))
        self.words = [corpus.words[starts[n]:starts[n + 1]] for n in range(corpus.n_docs)]
        self.counts = [corpus.counts[starts[n]:starts[n + 1]].astype(float) for n in range(corpus.n_docs)]


_CHUNK = 8


def _z_conditional_logits(prior_base, lg, words_rate, phi_col, counts, cap, threshold_log):
    """Unnormalized log posterior over z = 0, 1, ... with the stopping rule applied.

    ``prior_base[s] + z * lg[s]`` is the log integrand of simulated weight
    ``s`` for candidate ``z``; the prior term is their log mean minus log z!.
    """
    values = []
    running = -math.inf
    start = 0
    while start <= cap:
        zs = np.arange(start, min(start + _CHUNK, cap + 1))
        prior = (_log_mean_exp(prior_base[None, :] + zs[:, None] * lg[None, :], axis=1)
                 - special.gammaln(zs + 1.0))
        rate = words_rate[None, :] + zs[:, None] * phi_col[None, :]
        with np.errstate(divide="ignore"):
            like = (np.log(rate) * counts[None, :]).sum(axis=1) - zs
        like[np.isnan(like)] = -math.inf
        for val in prior + like:
            if math.isfinite(running) and val < running + threshold_log:
                return values
            running = max(running, val)
            values.append(float(val))
        start += _CHUNK
    return values


def sample_z(n: int, k: int, state: ChainState, corpus_index, config: McConfig, rng: SeededRng,
             weights=None) -> int:
    """Resample ``z_nk`` in place and return the new value.

    ``weights`` is an optional pair ``(lg, g)`` of simulated log weights and
    weights for atom ``k``; fresh ones are drawn when omitted.
    """
    if weights is None:
        S = config.mc_samples
        lg = _log_weights(rng.exponential(1.0, S), rng.gamma(int(state.d[k]), 1.0, S), state.alpha, state.c)
        g = np.exp(lg)
    else:
        lg, g = weights
    N = state.z.shape[1]
    current = int(state.z[k, n])
    rest_total = float(state.z[k].sum() - current)
    prior_base = rest_total * lg - (N - 1) * g - g
    # samples with negligible posterior weight cannot move the average
    keep = prior_base > prior_base.max() - 40.0
    prior_base, lg = prior_base[keep], lg[keep]
    words = corpus_index.words[n]
    phi_col = state.loadings[words, k]
    others = state.loadings[words] @ state.z[:, n] - phi_col * current
    cap = 10 * (current + 10)
    values = _z_conditional_logits(prior_base, lg, others, phi_col,
                                   corpus_index.counts[n], cap, math.log(config.tail_threshold))
    try:
        new = _draw_from_logits(values, rng)
    except SamplingError as exc:
        raise ChainError(f"z[{k}, {n}]: {exc}", location=("z", k, n)) from None
    state.z[k, n] = new
    return new


def sample_all_z(state: ChainState, corpus_index, config: McConfig, rng: SeededRng) -> None:
    S = config.mc_samples
    for k in range(state.n_atoms):
        sub = rng.substream("z", k)
        lg = _log_weights(sub.exponential(1.0, S), sub.gamma(int(state.d[k]), 1.0, S), state.alpha, state.c)
        weights = (lg, np.exp(lg))
        for n in range(state.z.shape[1]):
            sample_z(n, k, state, corpus_index, config, sub, weights)


# ---------------------------------------------------------------------------
# hyperparameters

def grid_sample(log_post, current: float, step: float, threshold: float, rng: SeededRng,
                max_points: int = 400) -> float:
    """Draw from a discretized posterior on ``current + t * step``.

    The grid extends in each direction until the log posterior drops below
    ``log(threshold)`` relative to the running maximum; it never includes
    values <= 0.
    """
    threshold_log = math.log(threshold)
    points = {0: float(log_post(current))}
    best = points[0]
    for direction in (1, -1):
        t = direction
        while len(points) < max_points:
            x = current + t * step
            if x <= 0:
                break
            val = float(log_post(x))
            points[t] = val
            best = max(best, val)
            if val < best + threshold_log:
                break
            t += direction
    ts = sorted(points)
    logits = np.array([points[t] for t in ts])
    return current + ts[_draw_from_logits(logits, rng)] * step


def _z_log_marginal(totals, n_docs, e0, t0, alpha, c):
    lg = np.log(e0) - math.log(c) - t0 / alpha
    return float(_row_logliks(totals, n_docs, lg).sum())


def sample_gamma_mass(state: ChainState, hyper: Hyperpriors, rng: SeededRng) -> float:
    """Conjugate draw ``Gamma(b1 + K, b2 + d_K)``."""
    K = state.n_atoms
    d_last = int(state.d[-1]) if K else 0
    return float(rng.gamma(hyper.b1 + K, hyper.b2 + d_last))


def sample_hypers(state: ChainState, hyper: Hyperpriors, config: McConfig, rng: SeededRng) -> None:
    """Update ``gamma_mass``, then ``alpha``, then ``c`` in place.

    With ``config.hyper_prior == "flat"`` the grid posteriors of ``alpha`` and
    ``c`` are the Monte Carlo marginal likelihood of ``Z`` alone. That posterior
    is improper in ``alpha`` and the chain can drift to very large values.
    ``"gamma"`` adds the ``Gamma(a1, a2)`` and ``Gamma(c1, c2)`` log densities.
    """
    state.gamma_mass = sample_gamma_mass(state, hyper, rng.substream("gamma"))
    K, N = state.z.shape
    if K == 0:
        return
    S = config.mc_samples
    base = rng.substream("hyper-base")
    e0 = base.exponential(1.0, (K, S))
    t0 = base.gamma(np.repeat(state.d[:, None], S, axis=1).astype(float), 1.0)
    totals = state.z.sum(axis=1).astype(float)
    if config.hyper_prior == "gamma":
        prior_a = lambda a: (hyper.a1 - 1) * math.log(a) - hyper.a2 * a
        prior_c = lambda c: (hyper.c1 - 1) * math.log(c) - hyper.c2 * c
    else:
        prior_a = prior_c = lambda _: 0.0
    state.alpha = grid_sample(lambda a: _z_log_marginal(totals, N, e0, t0, a, state.c) + prior_a(a),
                              state.alpha, config.grid_step_alpha, config.tail_threshold,
                              rng.substream("alpha"), config.max_grid_points)
    state.c = grid_sample(lambda c: _z_log_marginal(totals, N, e0, t0, state.alpha, c) + prior_c(c),
                          state.c, config.grid_step_c, config.tail_threshold,
                          rng.substream("c"), config.max_grid_points)


# ---------------------------------------------------------------------------
# the chain

def init_chain(corpus: Corpus, n_atoms: int, hyper: Hyperpriors, rng: SeededRng,
               alpha: float = 1.0, c: float = 1.0, gamma_mass: float = 1.0) -> ChainState:
    """Loadings from the prior, each document's length split evenly at random
    across atoms, and atoms filled into rounds ``ceil(gamma_mass)`` at a time."""
    if n_atoms < 1:
        raise DomainError("n_atoms must be >= 1")
    lengths = corpus.doc_lengths().astype(np.int64)
    z = rng.substream("init-z").multinomial(lengths, np.full(n_atoms, 1.0 / n_atoms)).T.copy()
    loadings = _dirichlet_columns(np.tile(hyper.beta[:, None], (1, n_atoms)), rng.substream("init-phi"))
    per_round = max(1, int(math.ceil(gamma_mass)))
    d = 1 + np.arange(n_atoms) // per_round
    return ChainState(z.astype(np.int64), loadings, d.astype(np.int64), float(alpha), float(c), float(gamma_mass))


def adapt_atoms(state: ChainState, hyper: Hyperpriors, rng: SeededRng) -> ChainState:
    """Drop trailing atoms with no counts, then append one fresh empty atom."""
    used = np.flatnonzero(state.z.sum(axis=1) > 0)
    keep = int(used[-1]) + 1 if used.size else 1
    z = state.z[:keep]
    loadings = state.loadings[:, :keep]
    d = state.d[:keep]
    if z[-1].any():
        fresh = _dirichlet_columns(hyper.beta[:, None], rng)
        z = np.vstack([z, np.zeros((1, z.shape[1]), dtype=z.dtype)])
        loadings = np.hstack([loadings, fresh])
        d = np.append(d, d[-1])
    return replace(state, z=z.copy(), loadings=loadings.copy(), d=d.copy())


class HeldoutAccumulator:
    """Held-out per-word log likelihood of the rate matrix averaged over samples."""

    def __init__(self, test: Corpus):
        self.test = test
        self.cell_sum = np.zeros(test.nnz)
        self.total_sum = 0.0

    def add(self, loadings, z) -> float:
        z = np.asarray(z, dtype=float)
        self.cell_sum += np.einsum("ik,ki->i", loadings[self.test.words], z[:, self.test.docs])
        self.total_sum += float(loadings.sum(axis=0) @ z.sum(axis=1))
        return self.value()

    def value(self) -> float:
        if self.test.n_tokens == 0 or self.total_sum <= 0:
            return float("nan")
        with np.errstate(divide="ignore"):
            logp = np.log(self.cell_sum / self.total_sum)
        return float(np.dot(self.test.counts, logp) / self.test.n_tokens)


def sweep(state: ChainState, corpus: Corpus, corpus_index, hyper: Hyperpriors,
          config: McConfig, rng: SeededRng) -> ChainState:
    """One Gibbs sweep; modifies and returns ``state``."""
    alloc = thin_counts(corpus, state, rng.substream("thin"))
    state.loadings = sample_loadings(alloc, hyper, rng.substream("phi"))
    sample_all_z(state, corpus_index, config, rng.substream("z"))
    rounds_rng = rng.substream("rounds")
    for k in range(state.n_atoms):
        state.d[k] = sample_round_indicator(k, state, config, rounds_rng.substream(k))
    sample_hypers(state, hyper, config, rng.substream("hypers"))
    return state


def run_chain(corpus_train: Corpus, corpus_test: Corpus, init: ChainState, hyper: Hyperpriors,
              config: McConfig, callback=None):
    """Run ``burn_in + n_iters`` sweeps; keep post-burn-in states and metrics.

    The held-out value at each post-burn-in iteration uses the rate matrix
    averaged over all post-burn-in samples so far.
    """
    if corpus_train.n_tokens == 0:
        raise DomainError("training corpus is empty")
    rng = SeededRng(config.seed)
    index = _DocIndex(corpus_train)
    state = init.copy()
    states = []
    trace = FitTrace()
    acc = HeldoutAccumulator(corpus_test)
    start = time.perf_counter()
    for it in range(config.burn_in + config.n_iters):
        it_rng = rng.substream("sweep", it)
        state = sweep(state, corpus_train, index, hyper, config, it_rng)
        if not all(math.isfinite(x) for x in (state.alpha, state.c, state.gamma_mass)):
            raise ChainError(f"non-finite hyperparameter at sweep {it}", location=("hypers", it))
        if config.adapt_atoms:
            state = adapt_atoms(state, hyper, it_rng.substream("adapt"))
        if it >= config.burn_in:
            held = acc.add(state.loadings, state.z)
            trace.append(None, held, time.perf_counter() - start)
            states.append(state.copy())
        if callback is not None:
            callback(it, state, trace)
    return states, trace
