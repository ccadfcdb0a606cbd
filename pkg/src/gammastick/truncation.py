"""Round-truncation error bound for the Poisson-likelihood gamma process."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .crm import GammaProcessParams, draw_batch
from .errors import DomainError
from .numeric import SeededRng


@dataclass(frozen=True)
class TruncationQuery:
    n_samples: int
    params: GammaProcessParams
    rounds: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise DomainError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.rounds < 0:
            raise DomainError(f"rounds must be >= 0, got {self.rounds}")


def _log_tail_rate(n_samples, params, rounds):
    # log of N * mass * (alpha / c) * decay**R
    return (math.log(n_samples) + math.log(params.mass) + math.log(params.alpha)
            - math.log(params.c) + rounds * math.log(params.decay))


def marginal_truncation_bound(q: TruncationQuery) -> float:
    """Upper bound on a quarter of the L1 distance between the data marginals
    of the full process and the process truncated after ``q.rounds`` rounds.
    """
    x = math.exp(_log_tail_rate(q.n_samples, q.params, q.rounds))
    return -math.expm1(-x)


def truncation_bound(n_samples: int, params: GammaProcessParams, rounds: int) -> float:
    return marginal_truncation_bound(TruncationQuery(n_samples, params, rounds))


def min_rounds_for_error(n_samples: int, params: GammaProcessParams, epsilon: float) -> int:
    """Smallest ``R >= 0`` whose truncation bound is at most ``epsilon``."""
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    if truncation_bound(n_samples, params, 0) <= epsilon:
        return 0
    # bound <= eps  <=>  tail rate <= -log1p(-eps); start from the real-valued solution
    target = math.log(-math.log1p(-epsilon))
    guess = (target - _log_tail_rate(n_samples, params, 0)) / math.log(params.decay)
    r = max(0, int(math.floor(guess)) - 1)
    while r > 0 and truncation_bound(n_samples, params, r - 1) <= epsilon:
        r -= 1
    while truncation_bound(n_samples, params, r) > epsilon:
        r += 1
    return r


def expected_residual_mass(params: GammaProcessParams, rounds: int) -> float:
    """Expected total weight of all atoms in rounds after ``rounds``."""
    if rounds < 0:
        raise DomainError(f"rounds must be >= 0, got {rounds}")
    return params.mass * params.alpha / params.c * params.decay ** rounds


@dataclass(frozen=True)
class TailEventEstimate:
    probability: float
    std_error: float
    correction: float
    replicates: int

    @property
    def upper(self) -> float:
        """Point estimate plus the union-bound allowance for unsimulated rounds."""
        return self.probability + self.correction


def simulate_tail_event(n_samples: int, params: GammaProcessParams, rounds: int,
                        replicates: int, rng: SeededRng, extra_rounds: int = 60) -> TailEventEstimate:
    """Monte Carlo estimate of P{some atom past round ``rounds`` gets a positive count}.

    Each replicate draws the process out to ``rounds + extra_rounds`` and then
    ``N`` Poisson counts per atom; the counts past round ``rounds`` are all
    zero exactly when a single Poisson(N * tail mass) draw is zero.  Rounds
    past the simulated depth are covered by the union bound
    ``N * expected_residual_mass``.
    """
    depth = rounds + extra_rounds
    batch = draw_batch(params, depth, replicates, "theorem", rng.substream("tail-draws"))
    tail = batch.masses_beyond(rounds)
    positive = rng.substream("tail-counts").poisson(n_samples * tail) > 0
    p = float(positive.mean())
    se = math.sqrt(p * (1 - p) / replicates)
    correction = n_samples * expected_residual_mass(params, depth)
    return TailEventEstimate(p, se, correction, replicates)
