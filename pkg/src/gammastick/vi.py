"""Truncated mean-field variational inference for the Gamma-Poisson factor model.

The variational family is

    q(E_k) = Gamma(xi_k, eps_k)        q(T_k) = Gamma(u_k, v_k)
    q(d_k) = Mult(phi_k)               q(z_nk) = Poisson(lam_nk)
    q(alpha) = Gamma(kappa1, kappa2)   q(mass) = Gamma(tau1, tau2)
    q(c) = Gamma(rho1, rho2)           q(Phi_k) = Dirichlet(b_k)

with ``K`` atoms and round indicators supported on ``1..R`` (``R`` is
``ViConfig.max_rounds``).  The evidence lower bound is assembled term by
term in :func:`elbo_terms`; two pieces need approximations:

* ``E[log n_r!]`` for the number of atoms ``n_r`` in round ``r`` is replaced
  by ``zeta / 2 * E[n_r (n_r - 1)]``, which is what produces the
  ``-zeta * sum_{i != k} phi_i(r)`` term of the round update;
* the data term ``E[log (Phi Z)_vn]`` is evaluated at the variational means.

Under these choices the updates for ``q(E)``, ``q(alpha)``, ``q(c)``,
``q(mass)`` and ``q(d)`` are exact coordinate maxima and the ``q(T)``
gradients are exact partial derivatives.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .crm import GammaProcessParams
from .errors import DomainError, FittingError, NumericalError
from .model import Corpus, Hyperpriors, heldout_per_word_loglik
from .numeric import SeededRng

LAMBDA_FLOOR = 1e-8
B_FLOOR = 1e-6
T_FLOOR = 1e-6

UPDATE_RULES = ("literal", "mean-field")


@dataclass(frozen=True)
class ViConfig:
    truncation_atoms: int = 30
    max_rounds: int = 10
    learning_rate: float = 1e-4
    grad_steps: int = 5
    zeta: float = 1.0
    max_iters: int = 100
    convergence_tol: float = 1e-3
    seed: int = 0
    # "literal" applies the printed lam and b updates; "mean-field" the
    # allocation-based updates
    update_rule: str = "literal"
    patience: int = 3

    def __post_init__(self):
        if self.truncation_atoms < 1:
            raise DomainError("truncation_atoms must be >= 1")
        if self.max_rounds < 1:
            raise DomainError("max_rounds must be >= 1")
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be > 0")
        if self.grad_steps < 0 or self.max_iters < 0:
            raise DomainError("grad_steps and max_iters must be >= 0")
        if self.update_rule not in UPDATE_RULES:
            raise DomainError(f"update_rule must be one of {UPDATE_RULES}")


@dataclass
class VariationalState:
    xi: np.ndarray
    eps: np.ndarray
    u: np.ndarray
    v: np.ndarray
    phi: np.ndarray      # K x R
    lam: np.ndarray      # N x K
    b: np.ndarray        # V x K
    kappa1: float
    kappa2: float
    tau1: float
    tau2: float
    rho1: float
    rho2: float

    @property
    def n_atoms(self) -> int:
        return self.xi.size

    @property
    def n_docs(self) -> int:
        return self.lam.shape[0]

    @property
    def max_rounds(self) -> int:
        return self.phi.shape[1]

    def copy(self) -> "VariationalState":
        return replace(self, **{f: getattr(self, f).copy()
                                for f in ("xi", "eps", "u", "v", "phi", "lam", "b")})

    def check(self) -> None:
        """Raise DomainError unless every parameter defines a valid distribution."""
        for name in ("xi", "eps", "u", "v", "b"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise DomainError(f"{name} must be finite and positive")
        for name in ("kappa1", "kappa2", "tau1", "tau2", "rho1", "rho2"):
            if not (getattr(self, name) > 0 and math.isfinite(getattr(self, name))):
                raise DomainError(f"{name} must be finite and positive")
        if np.any(self.lam < 0) or not np.all(np.isfinite(self.lam)):
            raise DomainError("lam must be finite and nonnegative")
        if np.any(self.phi < 0) or np.any(np.abs(self.phi.sum(axis=1) - 1.0) > 1e-9):
            raise DomainError("each phi_k must be a probability vector")

    def expected_loadings(self) -> np.ndarray:
        return self.b / self.b.sum(axis=0)

    def expected_counts(self) -> np.ndarray:
        """``K x N`` matrix of E[z_kn]."""
        return self.lam.T


@dataclass(frozen=True)
class Moments:
    e_E: np.ndarray
    elog_E: np.ndarray
    e_T: np.ndarray
    elog_T: np.ndarray
    e_expT: np.ndarray
    e_alpha: float
    elog_alpha: float
    e_c: float
    elog_c: float
    e_gamma: float
    elog_gamma: float


def q_moments(state: VariationalState) -> Moments:
    """Expectations under q needed by the updates and the bound."""
    u, v = state.u, state.v
    return Moments(
        e_E=state.xi / state.eps,
        elog_E=special.digamma(state.xi) - np.log(state.eps),
        e_T=u / v,
        elog_T=special.digamma(u) - np.log(v),
        e_expT=np.exp(u * (np.log(v) - np.log1p(v))),
        e_alpha=state.kappa1 / state.kappa2,
        elog_alpha=float(special.digamma(state.kappa1) - math.log(state.kappa2)),
        e_c=state.rho1 / state.rho2,
        elog_c=float(special.digamma(state.rho1) - math.log(state.rho2)),
        e_gamma=state.tau1 / state.tau2,
        elog_gamma=float(special.digamma(state.tau1) - math.log(state.tau2)),
    )


def init_state(corpus: Corpus, hyper: Hyperpriors, config: ViConfig,
               params0: GammaProcessParams | None = None, rng: SeededRng | None = None) -> VariationalState:
    """Symmetric starting point with a little jitter on the loadings.

    Global factors start at their hyperpriors; when ``params0`` is given the
    rates are set so the initial means equal ``params0``.
    """
    K, R = config.truncation_atoms, config.max_rounds
    rng = rng if rng is not None else SeededRng(config.seed)
    kappa2, tau2, rho2 = hyper.a2, hyper.b2, hyper.c2
    if params0 is not None:
        kappa2 = hyper.a1 / params0.alpha
        tau2 = hyper.b1 / params0.mass
        rho2 = hyper.c1 / params0.c
    lengths = corpus.doc_lengths()
    lam = np.repeat((lengths / K)[:, None], K, axis=1)
    b = hyper.beta[:, None] + rng.substream("init-b").uniform(0.0, 0.1, (corpus.vocab_size, K))
    return VariationalState(
        xi=np.ones(K), eps=np.full(K, hyper.c1 / rho2), u=np.ones(K), v=np.ones(K),
        phi=np.full((K, R), 1.0 / R), lam=np.maximum(lam, LAMBDA_FLOOR), b=b,
        kappa1=hyper.a1, kappa2=kappa2, tau1=hyper.b1, tau2=tau2, rho1=hyper.c1, rho2=rho2,
    )


# ---------------------------------------------------------------------------
# pieces shared by the updates and the bound

def _below(phi: np.ndarray) -> np.ndarray:
    """``F[k, r-1] = P(d_k < r)`` for r = 1..R."""
    cum = np.cumsum(phi, axis=1)
    return np.concatenate([np.zeros((phi.shape[0], 1)), cum[:, :-1]], axis=1)


def _occupied_rounds(phi: np.ndarray) -> float:
    """Expected number of rounds r in 1..R holding an atom at or after r."""
    return float(np.sum(1.0 - np.prod(_below(phi), axis=0)))


def round_logits(k: int, phi: np.ndarray, elog_alpha: float, elog_t_k: float,
                 e_gamma: float, zeta: float) -> np.ndarray:
    """Unnormalized log probabilities of ``d_k = r`` for r = 1..R."""
    K, R = phi.shape
    r = np.arange(1, R + 1)
    others = np.delete(phi, k, axis=0)
    crowd = others.sum(axis=0)
    prod_below = np.prod(_below(others), axis=0)   # empty product is 1 when K == 1
    advance = np.concatenate([[0.0], np.cumsum(prod_below[1:])])
    return (r * elog_alpha - special.gammaln(r) + (r - 1) * elog_t_k
            - zeta * crowd - e_gamma * advance)


def _softmax(logits):
    w = np.exp(logits - logits.max())
    return w / w.sum()


def t_gradient(u, v, phi_k_shape_excess, e_alpha, e_E, n_docs, lam_sum):
    """Partial derivatives of the bound in ``u_k`` and ``v_k``.

    ``phi_k_shape_excess`` is ``sum_r (r - 1) phi_k(r)``; ``lam_sum`` is
    ``sum_n lam_nk``.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    ratio = v / (v + 1.0)
    e_exp = ratio ** u
    tri = special.polygamma(1, u)
    du = (phi_k_shape_excess * tri - e_alpha / v
          - n_docs * e_E * e_exp * np.log(ratio)
          - lam_sum / v
          - (u - 1.0) * tri + 1.0)
    dv = (-phi_k_shape_excess / v + e_alpha * u / v ** 2
          - n_docs * e_E * u * v ** (u - 1.0) / (v + 1.0) ** (u + 1.0)
          + lam_sum * u / v ** 2
          - 1.0 / v)
    return du, dv


def grad_T(state: VariationalState, k=None):
    """Gradient of the bound in (u_k, v_k); all atoms when ``k`` is None."""
    m = q_moments(state)
    R = state.max_rounds
    excess = state.phi @ np.arange(R, dtype=float)
    du, dv = t_gradient(state.u, state.v, excess, m.e_alpha, m.e_E,
                        state.n_docs, state.lam.sum(axis=0))
    if k is None:
        return du, dv
    return float(du[k]), float(dv[k])


# ---------------------------------------------------------------------------
# updates; each returns a new state

def update_E(state: VariationalState) -> VariationalState:
    m = q_moments(state)
    out = state.copy()
    out.xi = state.lam.sum(axis=0) + 1.0
    out.eps = m.e_c + state.n_docs * m.e_expT
    return out


def update_global(state: VariationalState, hyper: Hyperpriors) -> VariationalState:
    m = q_moments(state)
    K, R = state.phi.shape
    out = state.copy()
    out.kappa1 = float((state.phi @ np.arange(1, R + 1)).sum()) + hyper.a1
    out.kappa2 = float(m.e_T.sum()) + hyper.a2
    out.rho1 = hyper.c1 + K
    out.rho2 = float(m.e_E.sum()) + hyper.c2
    out.tau1 = hyper.b1 + K
    out.tau2 = _occupied_rounds(state.phi) + hyper.b2
    return out


def update_rounds(state: VariationalState, zeta: float = 1.0) -> VariationalState:
    """Coordinate update of every ``q(d_k)``, atoms visited in index order."""
    m = q_moments(state)
    out = state.copy()
    for k in range(state.n_atoms):
        logits = round_logits(k, out.phi, m.elog_alpha, float(m.elog_T[k]), m.e_gamma, zeta)
        out.phi[k] = _softmax(logits)
    return out


def ascend_T(state: VariationalState, config: ViConfig) -> VariationalState:
    out = state.copy()
    for _ in range(config.grad_steps):
        du, dv = grad_T(out)
        out.u = np.maximum(out.u + config.learning_rate * du, T_FLOOR)
        out.v = np.maximum(out.v + config.learning_rate * dv, T_FLOOR)
    return out


def _allocate(state: VariationalState, corpus: Corpus) -> np.ndarray:
    """Split each nonzero cell's count across factors in proportion to
    ``E[phi_vk] lam_nk``; one row per corpus entry."""
    contrib = state.expected_loadings()[corpus.words] * state.lam[corpus.docs]
    return contrib * (corpus.counts / contrib.sum(axis=1))[:, None]


def update_loadings(state: VariationalState, corpus: Corpus, hyper: Hyperpriors,
                    method: str = "literal") -> VariationalState:
    """Update the Dirichlet parameters ``b_vk``.

    ``literal`` uses ``b_vk = beta_v + sum_n d_vn - sum_n lam_nk``;
    ``mean-field`` uses ``b_vk = beta_v + sum_n d_vn pi_vnk`` with the
    allocation ``pi`` of :func:`_allocate`.
    """
    out = state.copy()
    if method == "literal":
        b = hyper.beta[:, None] + corpus.word_totals()[:, None] - state.lam.sum(axis=0)[None, :]
    elif method == "mean-field":
        b = np.tile(hyper.beta[:, None], (1, state.n_atoms))
        np.add.at(b, corpus.words, _allocate(state, corpus))
    else:
        raise DomainError(f"unknown loading update {method!r}")
    out.b = np.maximum(b, B_FLOOR)
    return out


def update_counts(state: VariationalState, corpus: Corpus, method: str = "literal") -> VariationalState:
    """Update ``q(z_nk)``.

    ``literal`` sets ``lam_nk = -1 - sum_v d_vn + E[log E_k] + E[T_k]``.
    ``mean-field`` allocates each cell's count across factors in proportion
    to ``E[phi_vk] lam_nk`` and then maximizes the resulting minorizer,
    whose optimum is ``s / W(s * exp(1 - w))`` with ``s`` the allocated
    count, ``w = E[log E_k] - E[T_k]`` and ``W`` the Lambert function.
    """
    m = q_moments(state)
    out = state.copy()
    if method == "literal":
        lam = -1.0 - corpus.doc_lengths()[:, None] + (m.elog_E + m.e_T)[None, :]
    elif method == "mean-field":
        w = m.elog_E - m.e_T
        s = np.zeros_like(state.lam)
        np.add.at(s, corpus.docs, _allocate(state, corpus))
        lam = np.empty_like(s)
        pos = s > 0
        y = np.log(np.where(pos, s, 1.0)) + 1.0 - w[None, :]
        lam[pos] = s[pos] / special.wrightomega(y[pos]).real
        lam[~pos] = np.broadcast_to(np.exp(w - 1.0), s.shape)[~pos]
    else:
        raise DomainError(f"unknown count update {method!r}")
    out.lam = np.maximum(lam, LAMBDA_FLOOR)
    return out


# ---------------------------------------------------------------------------
# the bound

def _gamma_prior(shape, rate, e_x, elog_x):
    return shape * math.log(rate) - special.gammaln(shape) + (shape - 1.0) * elog_x - rate * e_x


def _gamma_entropy(shape, rate):
    return shape - np.log(rate) + special.gammaln(shape) + (1.0 - shape) * special.digamma(shape)


def elbo_terms(state: VariationalState, corpus: Corpus, hyper: Hyperpriors, zeta: float = 1.0) -> dict:
    """Every additive piece of the bound, keyed by name."""
    m = q_moments(state)
    K, R = state.phi.shape
    N = state.n_docs
    r = np.arange(1, R + 1)
    phi = state.phi
    lam = state.lam
    t = {}

    t["prior_alpha"] = _gamma_prior(hyper.a1, hyper.a2, m.e_alpha, m.elog_alpha)
    t["prior_mass"] = _gamma_prior(hyper.b1, hyper.b2, m.e_gamma, m.elog_gamma)
    t["prior_c"] = _gamma_prior(hyper.c1, hyper.c2, m.e_c, m.elog_c)

    occupancy = phi.sum(axis=0)
    pairs = occupancy ** 2 - np.sum(phi ** 2, axis=0)
    t["rounds"] = (K * m.elog_gamma - 0.5 * zeta * float(pairs.sum())
                   - m.e_gamma * _occupied_rounds(phi))

    t["prior_E"] = float(np.sum(m.elog_c - m.e_c * m.e_E))
    shape = phi @ r
    t["prior_T"] = float(np.sum(shape * m.elog_alpha - phi @ special.gammaln(r)
                                + (shape - 1.0) * m.elog_T - m.e_alpha * m.e_T))

    log_g = m.elog_E - m.e_T
    with np.errstate(divide="ignore", invalid="ignore"):
        xlogx = np.where(lam > 0, lam * np.log(lam), 0.0)
    # Poisson prior on z plus the Poisson entropy of q(z); the E[log z!] parts cancel
    t["counts"] = float(np.sum(lam * log_g[None, :]) - N * np.sum(m.e_E * m.e_expT)
                        + lam.sum() - xlogx.sum())

    beta = hyper.beta
    b = state.b
    b0 = b.sum(axis=0)
    elog_phi = special.digamma(b) - special.digamma(b0)[None, :]
    t["prior_loadings"] = float(K * (special.gammaln(beta.sum()) - special.gammaln(beta).sum())
                                + np.sum((beta - 1.0)[:, None] * elog_phi))

    e_phi = b / b0
    rate = np.einsum("ik,ik->i", e_phi[corpus.words], lam[corpus.docs])
    with np.errstate(divide="ignore"):
        t["data"] = float(np.dot(corpus.counts, np.log(rate)) - lam.sum()
                          - special.gammaln(corpus.counts + 1.0).sum())

    t["entropy_alpha"] = float(_gamma_entropy(state.kappa1, state.kappa2))
    t["entropy_mass"] = float(_gamma_entropy(state.tau1, state.tau2))
    t["entropy_c"] = float(_gamma_entropy(state.rho1, state.rho2))
    t["entropy_E"] = float(np.sum(_gamma_entropy(state.xi, state.eps)))
    t["entropy_T"] = float(np.sum(_gamma_entropy(state.u, state.v)))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(phi > 0, phi * np.log(phi), 0.0)
    t["entropy_rounds"] = float(-plogp.sum())
    V = b.shape[0]
    log_beta_fn = special.gammaln(b).sum(axis=0) - special.gammaln(b0)
    t["entropy_loadings"] = float(np.sum(log_beta_fn + (b0 - V) * special.digamma(b0)
                                         - np.sum((b - 1.0) * special.digamma(b), axis=0)))
    return t


def elbo(state: VariationalState, corpus: Corpus, hyper: Hyperpriors, zeta: float = 1.0) -> float:
    terms = elbo_terms(state, corpus, hyper, zeta)
    for name, value in terms.items():
        if not math.isfinite(value):
            raise NumericalError(f"non-finite bound term {name!r}: {value}", term=name)
    return math.fsum(terms.values())


# ---------------------------------------------------------------------------
# fitting loop

@dataclass
class FitTrace:
    elbo: list = field(default_factory=list)
    heldout: list = field(default_factory=list)
    elapsed_seconds: list = field(default_factory=list)
    initial_elbo: float | None = None
    initial_heldout: float | None = None

    def __len__(self):
        return len(self.heldout)

    def append(self, elbo_value, heldout_value, elapsed):
        self.elbo.append(elbo_value)
        self.heldout.append(heldout_value)
        self.elapsed_seconds.append(elapsed)


def vi_heldout(state: VariationalState, test: Corpus) -> float:
    if test.n_tokens == 0:
        return float("nan")
    return heldout_per_word_loglik(test, state.expected_loadings(), state.expected_counts())


def vi_step(state: VariationalState, corpus: Corpus, hyper: Hyperpriors, config: ViConfig) -> VariationalState:
    """One pass of every update in the fixed order."""
    state = update_counts(state, corpus, config.update_rule)
    state = update_loadings(state, corpus, hyper, config.update_rule)
    state = update_E(state)
    state = ascend_T(state, config)
    state = update_rounds(state, config.zeta)
    return update_global(state, hyper)


def fit(corpus_train: Corpus, corpus_test: Corpus, params0: GammaProcessParams | None,
        hyper: Hyperpriors, config: ViConfig, callback=None):
    """Run coordinate ascent until the held-out metric settles or ``max_iters``.

    Converged means ``|delta heldout| < convergence_tol`` for ``patience``
    consecutive iterations.  Returns the final state and a :class:`FitTrace`.
    """
    if corpus_train.n_tokens == 0:
        raise DomainError("training corpus is empty")
    rng = SeededRng(config.seed)
    state = init_state(corpus_train, hyper, config, params0, rng)
    trace = FitTrace()
    trace.initial_elbo = elbo(state, corpus_train, hyper, config.zeta)
    trace.initial_heldout = vi_heldout(state, corpus_test)
    start = time.perf_counter()
    previous = trace.initial_heldout
    calm = 0
    for it in range(1, config.max_iters + 1):
        state = vi_step(state, corpus_train, hyper, config)
        try:
            value = elbo(state, corpus_train, hyper, config.zeta)
        except NumericalError as exc:
            raise FittingError(f"iteration {it}: {exc}", iteration=it) from exc
        held = vi_heldout(state, corpus_test)
        trace.append(value, held, time.perf_counter() - start)
        if callback is not None:
            callback(it, state, trace)
        calm = calm + 1 if abs(held - previous) < config.convergence_tol else 0
        previous = held
        if calm >= config.patience:
            break
    return state, trace
