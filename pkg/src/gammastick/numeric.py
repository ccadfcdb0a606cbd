"""Seeded random streams, special functions and goodness-of-fit tests.

Every distribution uses the *rate* parameterization: ``Gamma(shape, rate)``
has mean ``shape / rate`` and ``Exponential(rate)`` has mean ``1 / rate``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .errors import DomainError

__all__ = [
    "SeededRng", "TestReport",
    "log_gamma", "digamma", "trigamma", "gamma_cdf",
    "Exponential", "Gamma", "Beta", "Poisson", "Dirichlet", "Multinomial",
    "sample", "ks_test", "ks_two_sample", "chi_square_gof",
]

_U64 = (1 << 64) - 1


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise DomainError(f"sub-stream labels must be nonnegative, got {label}")
        return int(label)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class SeededRng:
    """A reproducible random stream identified by a seed and a label path.

    Sub-streams are derived from the label path rather than from the parent's
    state, so ``rng.substream("atom", 3)`` yields the same numbers no matter
    how much the parent has already been consumed, and no matter in which
    order sibling sub-streams are created.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        if seed < 0:
            raise DomainError("seed must be a nonnegative integer")
        self.seed = int(seed) & _U64
        self._path = tuple(_path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def substream(self, *labels) -> "SeededRng":
        return SeededRng(self.seed, self._path + tuple(_label_key(l) for l in labels))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self._path})"

    # thin rate-parameterized wrappers over the numpy generator

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def exponential(self, rate, size=None):
        return self.generator.exponential(1.0 / np.asarray(rate, dtype=float), size)

    def gamma(self, shape, rate, size=None):
        return self.generator.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size)

    def beta(self, a, b, size=None):
        return self.generator.beta(a, b, size)

    def poisson(self, mean, size=None):
        return self.generator.poisson(mean, size)

    def dirichlet(self, weights, size=None):
        return self.generator.dirichlet(weights, size)

    def multinomial(self, n, probs, size=None):
        return self.generator.multinomial(n, probs, size)

    def choice(self, n, p=None):
        return int(self.generator.choice(n, p=p))


# ---------------------------------------------------------------------------
# special functions

def _check_positive(x, name):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError(f"{name} requires finite positive arguments")
    return arr


def _out(value, like):
    return float(value) if np.ndim(like) == 0 else value


def log_gamma(x):
    """Natural log of the gamma function for positive ``x``."""
    arr = _check_positive(x, "log_gamma")
    return _out(special.gammaln(arr), x)


def digamma(x):
    arr = _check_positive(x, "digamma")
    return _out(special.digamma(arr), x)


def trigamma(x):
    arr = _check_positive(x, "trigamma")
    return _out(special.polygamma(1, arr), x)


def gamma_cdf(x, shape, rate):
    """Regularized lower incomplete gamma ``P(shape, rate * x)``."""
    if not (shape > 0 and rate > 0 and math.isfinite(shape) and math.isfinite(rate)):
        raise DomainError(f"gamma_cdf needs shape > 0 and rate > 0, got {shape}, {rate}")
    arr = np.asarray(x, dtype=float)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise DomainError("gamma_cdf is defined for x >= 0")
    return _out(special.gammainc(shape, rate * arr), x)


# ---------------------------------------------------------------------------
# distributions

def _require(cond, msg):
    if not cond:
        raise DomainError(msg)


@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self):
        _require(self.rate > 0 and math.isfinite(self.rate), f"Exponential rate must be > 0, got {self.rate}")

    def draw(self, rng: SeededRng, size=None):
        return rng.exponential(self.rate, size)

    def cdf(self, x):
        return -np.expm1(-self.rate * np.maximum(np.asarray(x, dtype=float), 0.0))

    def mean(self):
        return 1.0 / self.rate

    def var(self):
        return 1.0 / self.rate ** 2


@dataclass(frozen=True)
class Gamma:
    shape: float
    rate: float

    def __post_init__(self):
        _require(self.shape > 0 and self.rate > 0 and math.isfinite(self.shape) and math.isfinite(self.rate),
                 f"Gamma needs shape > 0 and rate > 0, got ({self.shape}, {self.rate})")

    def draw(self, rng, size=None):
        return rng.gamma(self.shape, self.rate, size)

    def cdf(self, x):
        return special.gammainc(self.shape, self.rate * np.maximum(np.asarray(x, dtype=float), 0.0))

    def mean(self):
        return self.shape / self.rate

    def var(self):
        return self.shape / self.rate ** 2


@dataclass(frozen=True)
class Beta:
    a: float
    b: float

    def __post_init__(self):
        _require(self.a > 0 and self.b > 0, f"Beta needs a > 0 and b > 0, got ({self.a}, {self.b})")

    def draw(self, rng, size=None):
        return rng.beta(self.a, self.b, size)

    def cdf(self, x):
        return special.betainc(self.a, self.b, np.clip(np.asarray(x, dtype=float), 0.0, 1.0))

    def mean(self):
        return self.a / (self.a + self.b)

    def var(self):
        s = self.a + self.b
        return self.a * self.b / (s * s * (s + 1))


@dataclass(frozen=True)
class Poisson:
    mean_: float

    def __post_init__(self):
        _require(self.mean_ >= 0 and math.isfinite(self.mean_), f"Poisson mean must be >= 0, got {self.mean_}")

    def draw(self, rng, size=None):
        return rng.poisson(self.mean_, size)

    def mean(self):
        return self.mean_

    def var(self):
        return self.mean_


@dataclass(frozen=True)
class Dirichlet:
    weights: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        _require(w.ndim == 1 and w.size >= 1 and np.all(w > 0), "Dirichlet weights must be a positive vector")

    def draw(self, rng, size=None):
        return rng.dirichlet(np.asarray(self.weights, dtype=float), size)

    def mean(self):
        w = np.asarray(self.weights, dtype=float)
        return w / w.sum()


@dataclass(frozen=True)
class Multinomial:
    n: int
    probs: tuple

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        _require(self.n >= 0, "Multinomial n must be >= 0")
        _require(p.ndim == 1 and np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-9,
                 "Multinomial probs must be a probability vector")

    def draw(self, rng, size=None):
        return rng.multinomial(self.n, np.asarray(self.probs, dtype=float), size)

    def mean(self):
        return self.n * np.asarray(self.probs, dtype=float)


def sample(dist, rng: SeededRng, size=None):
    """Draw from one of the distribution specs defined in this module."""
    return dist.draw(rng, size)


# ---------------------------------------------------------------------------
# goodness-of-fit tests

@dataclass(frozen=True)
class TestReport:
    __test__ = False  # keep pytest from collecting this class

    statistic: float
    p_value: float
    sample_sizes: tuple = field(default=())


def _kolmogorov_sf(lam: float) -> float:
    return float(min(1.0, max(0.0, special.kolmogorov(lam))))


def ks_test(samples: Sequence[float], cdf) -> TestReport:
    """One-sample Kolmogorov-Smirnov test with the asymptotic p-value.

    ``cdf`` is either a distribution object with a ``cdf`` method or a
    vectorized callable.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise DomainError("ks_test needs at least one sample")
    f: Callable = cdf.cdf if hasattr(cdf, "cdf") else cdf
    F = np.asarray(f(x), dtype=float)
    i = np.arange(1, n + 1)
    d = max(np.max(i / n - F), np.max(F - (i - 1) / n))
    return TestReport(float(d), _kolmogorov_sf(math.sqrt(n) * d), (n,))


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> TestReport:
    x = np.sort(np.asarray(a, dtype=float))
    y = np.sort(np.asarray(b, dtype=float))
    n, m = x.size, y.size
    if n == 0 or m == 0:
        raise DomainError("ks_two_sample needs nonempty samples")
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / n
    fy = np.searchsorted(y, grid, side="right") / m
    d = float(np.max(np.abs(fx - fy)))
    en = math.sqrt(n * m / (n + m))
    return TestReport(d, _kolmogorov_sf(en * d), (n, m))


def chi_square_gof(counts: Sequence[int], pmf: Callable[[np.ndarray], np.ndarray],
                   min_expected: float = 5.0) -> TestReport:
    """Chi-square goodness of fit of integer ``counts`` against a pmf on 0, 1, 2, ...

    Cells are merged from the right until every expected count reaches
    ``min_expected``; the last cell absorbs the upper tail.
    """
    obs = np.asarray(counts, dtype=np.int64)
    if obs.size == 0:
        raise DomainError("chi_square_gof needs samples")
    if np.any(obs < 0):
        raise DomainError("counts must be nonnegative")
    n = obs.size
    top = int(obs.max())
    support = np.arange(top + 1)
    observed = np.bincount(obs, minlength=top + 1).astype(float)
    probs = np.asarray(pmf(support), dtype=float)
    probs[-1] += max(0.0, 1.0 - probs.sum())
    expected = n * probs
    # merge from the right into the tail bin, then merge underfilled left bins
    while expected.size > 1 and expected[-1] < min_expected:
        expected[-2] += expected[-1]
        observed[-2] += observed[-1]
        expected, observed = expected[:-1], observed[:-1]
    while expected.size > 1 and expected[0] < min_expected:
        expected[1] += expected[0]
        observed[1] += observed[0]
        expected, observed = expected[1:], observed[1:]
    if expected.size < 2:
        return TestReport(0.0, 1.0, (n,))
    stat = float(np.sum((observed - expected) ** 2 / expected))
    p = float(stats.chi2.sf(stat, expected.size - 1))
    return TestReport(stat, p, (n,))
