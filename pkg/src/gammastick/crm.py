"""Truncated stick-breaking draws from the gamma process.

A draw proceeds in rounds.  Round ``i`` contributes ``C_i ~ Poisson(mass)``
atoms whose weights can be generated in three equivalent ways:

``round-product``
    ``G * V0 * prod_{l=1..i} (1 - V_l)`` with ``G ~ Gamma(alpha + 1, c)`` and
    ``V0, V_1, ..., V_i ~ Beta(1, alpha)`` all independent.
``theorem``
    ``E * exp(-T)`` with ``E ~ Exp(c)`` and ``T ~ Gamma(i, alpha)``.
``ibp-product``
    ``E * prod_{l=1..i} U_l`` with ``E ~ Exp(c)`` and ``U_l ~ Beta(alpha, 1)``.

All three share the same law; the total mass of the untruncated process is
``Gamma(alpha * mass, c)``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DomainError, ParseError
from .numeric import SeededRng

VARIANTS = ("round-product", "theorem", "ibp-product")

_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class GammaProcessParams:
    alpha: float
    c: float
    mass: float

    def __post_init__(self):
        for name in ("alpha", "c", "mass"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise DomainError(f"{name} must be a finite positive number, got {value}")

    @property
    def decay(self) -> float:
        """Ratio between expected atom weights of consecutive rounds."""
        return self.alpha / (1.0 + self.alpha)


@dataclass(frozen=True)
class WeightedAtom:
    round: int
    index_in_round: int
    weight: float
    atom_id: int


@dataclass
class GammaProcessDraw:
    params: GammaProcessParams
    rounds: int
    atoms: list = field(default_factory=list)

    def __len__(self):
        return len(self.atoms)

    @property
    def weights(self) -> np.ndarray:
        return np.array([a.weight for a in self.atoms], dtype=float)

    @property
    def round_indices(self) -> np.ndarray:
        return np.array([a.round for a in self.atoms], dtype=np.int64)

    def round_counts(self) -> np.ndarray:
        """Number of atoms in each round 1..rounds."""
        counts = np.zeros(self.rounds, dtype=np.int64)
        for a in self.atoms:
            counts[a.round - 1] += 1
        return counts


def _check_variant(variant):
    if variant not in VARIANTS:
        raise DomainError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def sample_round_weights(params: GammaProcessParams, round_index: int, size: int,
                         variant: str, rng: SeededRng) -> np.ndarray:
    """Draw ``size`` independent atom weights for round ``round_index``."""
    _check_variant(variant)
    if round_index < 1:
        raise DomainError(f"round must be >= 1, got {round_index}")
    a, c, i = params.alpha, params.c, int(round_index)
    if variant == "theorem":
        e = rng.exponential(c, size)
        t = rng.gamma(i, a, size)
        w = e * np.exp(-t)
    elif variant == "ibp-product":
        e = rng.exponential(c, size)
        log_u = np.log(rng.beta(a, 1.0, (i, size))).sum(axis=0)
        w = e * np.exp(log_u)
    else:
        g = rng.gamma(a + 1.0, c, size)
        v0 = rng.beta(1.0, a, size)
        # accumulate the remaining-stick product in log space
        with np.errstate(divide="ignore"):
            log_rest = np.log1p(-rng.beta(1.0, a, (i, size))).sum(axis=0)
        w = g * v0 * np.exp(log_rest)
    return np.maximum(w, _TINY)


def draw_stick(params: GammaProcessParams, rounds: int, variant: str,
               rng: SeededRng) -> GammaProcessDraw:
    """Draw the process truncated after ``rounds`` rounds.

    Each round uses its own labelled sub-stream, so the output for round ``i``
    does not depend on how many rounds are requested.
    """
    _check_variant(variant)
    if rounds < 1:
        raise DomainError(f"rounds must be >= 1, got {rounds}")
    atoms = []
    next_id = 0
    for i in range(1, rounds + 1):
        sub = rng.substream("round", i)
        n_atoms = int(sub.poisson(params.mass))
        if n_atoms == 0:
            continue
        weights = sample_round_weights(params, i, n_atoms, variant, sub)
        for j, w in enumerate(weights, start=1):
            atoms.append(WeightedAtom(i, j, float(w), next_id))
            next_id += 1
    return GammaProcessDraw(params, rounds, atoms)


@dataclass
class DrawBatch:
    """Many independent truncated draws in columnar form.

    ``counts[d, i]`` is the number of atoms of draw ``d`` in round ``i + 1``;
    ``weights[i]`` and ``owners[i]`` list the round-``i + 1`` atom weights and
    the draw each belongs to.
    """

    params: GammaProcessParams
    rounds: int
    counts: np.ndarray
    weights: list
    owners: list

    @property
    def n_draws(self) -> int:
        return self.counts.shape[0]

    def total_masses(self) -> np.ndarray:
        out = np.zeros(self.n_draws)
        for w, o in zip(self.weights, self.owners):
            out += np.bincount(o, weights=w, minlength=self.n_draws)
        return out

    def masses_beyond(self, r: int) -> np.ndarray:
        """Per-draw mass held in rounds strictly greater than ``r``."""
        out = np.zeros(self.n_draws)
        for w, o in zip(self.weights[r:], self.owners[r:]):
            out += np.bincount(o, weights=w, minlength=self.n_draws)
        return out


def draw_batch(params: GammaProcessParams, rounds: int, n_draws: int, variant: str,
               rng: SeededRng) -> DrawBatch:
    """Vectorized equivalent of ``n_draws`` calls to :func:`draw_stick`."""
    _check_variant(variant)
    if rounds < 1:
        raise DomainError(f"rounds must be >= 1, got {rounds}")
    counts = np.empty((n_draws, rounds), dtype=np.int64)
    weights, owners = [], []
    for i in range(1, rounds + 1):
        sub = rng.substream("batch-round", i)
        c_i = sub.poisson(params.mass, n_draws)
        counts[:, i - 1] = c_i
        weights.append(sample_round_weights(params, i, int(c_i.sum()), variant, sub))
        owners.append(np.repeat(np.arange(n_draws), c_i))
    return DrawBatch(params, rounds, counts, weights, owners)


def total_mass(draw: GammaProcessDraw) -> float:
    return float(math.fsum(a.weight for a in draw.atoms))


def expected_round_weight(params: GammaProcessParams, round_index: int) -> float:
    """Mean weight of a single atom in round ``round_index``."""
    if round_index < 1:
        raise DomainError(f"round must be >= 1, got {round_index}")
    return params.decay ** round_index / params.c


def expected_total_mass(params: GammaProcessParams) -> float:
    return params.mass * params.alpha / params.c


# ---------------------------------------------------------------------------
# text serialization: one "round index weight atom_id" line per atom

def write_draw(draw: GammaProcessDraw, fh, header: Iterable[str] = ()) -> None:
    for line in header:
        fh.write(f"# {line}\n")
    p = draw.params
    fh.write(f"# alpha={p.alpha!r} c={p.c!r} mass={p.mass!r} rounds={draw.rounds}\n")
    for a in draw.atoms:
        fh.write(f"{a.round} {a.index_in_round} {a.weight!r} {a.atom_id}\n")


def dumps_draw(draw: GammaProcessDraw) -> str:
    buf = io.StringIO()
    write_draw(draw, buf)
    return buf.getvalue()


def read_draw(fh) -> GammaProcessDraw:
    meta = None
    atoms = []
    for lineno, raw in enumerate(fh, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            fields = dict(tok.split("=", 1) for tok in line[1:].split() if "=" in tok)
            if {"alpha", "c", "mass", "rounds"} <= fields.keys():
                meta = fields
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, found {len(parts)}", lineno)
        try:
            atoms.append(WeightedAtom(int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    if meta is None:
        raise ParseError("missing parameter header line")
    params = GammaProcessParams(float(meta["alpha"]), float(meta["c"]), float(meta["mass"]))
    return GammaProcessDraw(params, int(meta["rounds"]), atoms)


def loads_draw(text: str) -> GammaProcessDraw:
    return read_draw(io.StringIO(text))
