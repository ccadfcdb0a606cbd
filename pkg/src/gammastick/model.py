"""The infinite Gamma-Poisson factor model for document count matrices.

A corpus is a ``V x N`` count matrix ``D`` (words by documents) modelled as
``D ~ Poisson(Phi @ Z)``, where the columns of ``Phi`` (``V x K``) are
Dirichlet-distributed factor loadings and ``Z`` (``K x N``) holds factor
counts with ``z_kn ~ Poisson(g_k)`` for gamma-process atom weights ``g_k``.

Word and document ids are 0-based in memory; the UCI file format uses
1-based ids and is converted at the I/O boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crm import GammaProcessDraw, GammaProcessParams, draw_stick
from .errors import DomainError, EvaluationError
from .numeric import SeededRng


@dataclass(frozen=True, eq=False)
class Corpus:
    vocab_size: int
    n_docs: int
    words: np.ndarray
    docs: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if self.vocab_size < 1 or self.n_docs < 1:
            raise DomainError("a corpus needs vocab_size >= 1 and n_docs >= 1")
        w = np.asarray(self.words, dtype=np.int64)
        d = np.asarray(self.docs, dtype=np.int64)
        c = np.asarray(self.counts, dtype=np.int64)
        if not (w.shape == d.shape == c.shape) or w.ndim != 1:
            raise DomainError("words, docs and counts must be equal-length vectors")
        if w.size:
            if w.min() < 0 or w.max() >= self.vocab_size:
                raise DomainError("word id out of range")
            if d.min() < 0 or d.max() >= self.n_docs:
                raise DomainError("doc id out of range")
            if c.min() < 1:
                raise DomainError("corpus counts must be >= 1 (zeros are implicit)")
        order = np.lexsort((w, d))
        w, d, c = w[order], d[order], c[order]
        if w.size > 1:
            dup = (np.diff(d) == 0) & (np.diff(w) == 0)
            if dup.any():
                i = int(np.argmax(dup))
                raise DomainError(f"duplicate (word, doc) pair ({w[i]}, {d[i]})")
        for name, arr in (("words", w), ("docs", d), ("counts", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_dense(cls, matrix) -> "Corpus":
        m = np.asarray(matrix)
        if m.ndim != 2:
            raise DomainError("dense corpus must be a V x N matrix")
        if np.any(m < 0) or np.any(m != np.round(m)):
            raise DomainError("dense corpus must hold nonnegative integers")
        w, d = np.nonzero(m)
        return cls(m.shape[0], m.shape[1], w, d, m[w, d].astype(np.int64))

    @classmethod
    def empty(cls, vocab_size: int, n_docs: int) -> "Corpus":
        z = np.zeros(0, dtype=np.int64)
        return cls(vocab_size, n_docs, z, z, z)

    @property
    def nnz(self) -> int:
        return int(self.counts.size)

    @property
    def n_tokens(self) -> int:
        return int(self.counts.sum())

    def dense(self) -> np.ndarray:
        m = np.zeros((self.vocab_size, self.n_docs), dtype=np.int64)
        m[self.words, self.docs] = self.counts
        return m

    def doc_lengths(self) -> np.ndarray:
        return np.bincount(self.docs, weights=self.counts, minlength=self.n_docs)

    def word_totals(self) -> np.ndarray:
        return np.bincount(self.words, weights=self.counts, minlength=self.vocab_size)

    def entries(self):
        return list(zip(self.words.tolist(), self.docs.tolist(), self.counts.tolist()))

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.vocab_size == other.vocab_size and self.n_docs == other.n_docs
                and np.array_equal(self.words, other.words)
                and np.array_equal(self.docs, other.docs)
                and np.array_equal(self.counts, other.counts))


@dataclass(frozen=True, eq=False)
class FactorLoadings:
    """``V x K`` matrix whose columns are probability vectors."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise DomainError("loadings must be a V x K matrix")
        if np.any(v < 0):
            raise DomainError("loadings must be nonnegative")
        if v.shape[1] and np.any(np.abs(v.sum(axis=0) - 1.0) > 1e-9):
            raise DomainError("each loading column must sum to 1")
        object.__setattr__(self, "values", v)

    @property
    def vocab_size(self):
        return self.values.shape[0]

    @property
    def n_factors(self):
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class FactorCounts:
    """``K x N`` matrix of nonnegative factor counts (or their means)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise DomainError("factor counts must be a K x N matrix")
        if np.any(v < 0):
            raise DomainError("factor counts must be nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def n_factors(self):
        return self.values.shape[0]

    @property
    def n_docs(self):
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Hyperpriors:
    """Gamma hyperpriors ``alpha ~ Gamma(a1, a2)``, ``mass ~ Gamma(b1, b2)``,
    ``c ~ Gamma(c1, c2)`` and the Dirichlet parameters ``beta`` on loadings."""

    beta: np.ndarray
    a1: float = 1.0
    a2: float = 1.0
    b1: float = 1.0
    b2: float = 1.0
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0):
            raise DomainError("beta must be a positive vector")
        for name in ("a1", "a2", "b1", "b2", "c1", "c2"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        object.__setattr__(self, "beta", b)

    @classmethod
    def symmetric(cls, vocab_size: int, beta: float = 0.1, **gamma_hypers) -> "Hyperpriors":
        return cls(np.full(vocab_size, float(beta)), **gamma_hypers)


@dataclass(frozen=True)
class GroundTruth:
    draw: GammaProcessDraw
    loadings: FactorLoadings
    counts: FactorCounts


def _values(x):
    return np.asarray(getattr(x, "values", x))


def generate_synthetic(params: GammaProcessParams, hyper: Hyperpriors, vocab_size: int,
                       n_docs: int, rounds: int, rng: SeededRng):
    """Sample a corpus and its generating latent state from the model."""
    if vocab_size < 1 or n_docs < 1:
        raise DomainError("vocab_size and n_docs must be >= 1")
    if hyper.beta.size != vocab_size:
        raise DomainError("hyperprior beta length must equal vocab_size")
    draw = draw_stick(params, rounds, "theorem", rng.substream("atoms"))
    weights = draw.weights
    k = weights.size
    z = rng.substream("counts").poisson(weights[:, None], (k, n_docs)).astype(np.int64)
    if k:
        phi = rng.substream("loadings").dirichlet(hyper.beta, k).T
    else:
        phi = np.zeros((vocab_size, 0))
    rates = phi @ z
    data = rng.substream("data").poisson(rates)
    corpus = Corpus.from_dense(data)
    return corpus, GroundTruth(draw, FactorLoadings(phi), FactorCounts(z))


def train_test_split(corpus: Corpus, train_fraction: float, rng: SeededRng):
    """Assign every token to train independently with probability ``train_fraction``."""
    if not 0.0 < train_fraction < 1.0:
        raise DomainError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    train_counts = rng.generator.binomial(corpus.counts, train_fraction)
    test_counts = corpus.counts - train_counts

    def keep(cnt):
        m = cnt > 0
        return Corpus(corpus.vocab_size, corpus.n_docs, corpus.words[m], corpus.docs[m], cnt[m])

    return keep(train_counts), keep(test_counts)


def rate_probabilities(loadings, counts, words=None, docs=None) -> np.ndarray:
    """Normalized rates ``p_vn = (Phi Z)_vn / sum(Phi Z)``.

    Returns the full ``V x N`` matrix, or only the listed cells when
    ``words`` and ``docs`` are given.
    """
    phi = _values(loadings).astype(float)
    z = _values(counts).astype(float)
    if phi.shape[1] != z.shape[0]:
        raise DomainError(f"loadings have {phi.shape[1]} factors but counts have {z.shape[0]}")
    total = float(phi.sum(axis=0) @ z.sum(axis=1))
    if not total > 0:
        raise EvaluationError("the rate matrix is identically zero")
    if words is None:
        return (phi @ z) / total
    cell = np.einsum("ik,ki->i", phi[words], z[:, docs])
    return cell / total


def heldout_per_word_loglik(test: Corpus, loadings, counts) -> float:
    """Average log probability of the held-out tokens under normalized rates."""
    if test.n_tokens == 0:
        raise EvaluationError("the test corpus holds no tokens")
    phi = _values(loadings)
    z = _values(counts)
    if phi.shape[0] != test.vocab_size or z.shape[1] != test.n_docs:
        raise DomainError("model dimensions do not match the test corpus")
    p = rate_probabilities(phi, z, test.words, test.docs)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    return float(np.dot(test.counts, logp) / test.n_tokens)
