"""Statistical acceptance checks for the whole package.

Every check returns a :class:`CheckResult` naming what was measured, the
observed value and the requirement it was held to.  ``quick=True`` lowers
replication counts so the suite fits in a CI job; the full mode uses the
acceptance-grade sizes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from . import mcmc, vi
from .crm import GammaProcessParams, draw_batch, expected_round_weight, sample_round_weights
from .model import Corpus, Hyperpriors, generate_synthetic, train_test_split
from .numeric import Gamma, SeededRng, ks_test, ks_two_sample
from .truncation import simulate_tail_event, truncation_bound


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    observed: str
    required: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: observed {self.observed}; required {self.required} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        name, passed, observed, required = fn(*args, **kwargs)
        return CheckResult(name, bool(passed), observed, required, time.perf_counter() - t0)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# construction

@_timed
def check_construction_moments(quick=False, seed=101):
    """Mean total mass and mean per-round atom weights against closed forms."""
    params = GammaProcessParams(1.0, 1.0, 5.0)
    n = 2000 if quick else 10_000
    batch = draw_batch(params, 30, n, "theorem", SeededRng(seed))
    masses = batch.total_masses()
    z_mass = (masses.mean() - 5.0) / (masses.std(ddof=1) / math.sqrt(n))
    z_rounds = []
    for i in range(1, 6):
        w = batch.weights[i - 1]
        z_rounds.append((w.mean() - expected_round_weight(params, i)) / (w.std(ddof=1) / math.sqrt(w.size)))
    worst = float(np.max(np.abs(z_rounds)))
    passed = abs(z_mass) <= 3.0 and worst <= 4.0
    return ("construction moments", passed,
            f"mass z={z_mass:+.2f}, worst round z={worst:.2f}", "|mass z| <= 3, |round z| <= 4")


@_timed
def check_total_mass_law(quick=False, seed=202):
    """KS test of truncated total masses against Gamma(alpha * mass, c)."""
    params = GammaProcessParams(1.0, 1.0, 5.0)
    reps, n = (20, 2000) if quick else (100, 10_000)
    target = Gamma(params.alpha * params.mass, params.c)
    root = SeededRng(seed)
    passes = 0
    for r in range(reps):
        masses = draw_batch(params, 30, n, "theorem", root.substream(r)).total_masses()
        passes += ks_test(masses, target).p_value > 0.01
    need = math.floor(0.95 * reps)
    return ("total mass law", passes >= need, f"{passes}/{reps} KS p > 0.01", f">= {need}/{reps}")


@_timed
def check_representation_equivalence(quick=False, seed=303):
    """Pairwise two-sample KS between the three round-weight representations."""
    params = GammaProcessParams(1.0, 1.0, 1.0)
    variants = ("round-product", "theorem", "ibp-product")
    pairs = [(0, 1), (0, 2), (1, 2)]
    reps, n = (20, 1000) if quick else (100, 2000)
    need = math.floor(0.98 * reps)
    root = SeededRng(seed)
    worst = reps
    for i in (1, 2, 3):
        passes = np.zeros(len(pairs), dtype=int)
        for r in range(reps):
            draws = [sample_round_weights(params, i, n, v, root.substream(i, r, v)) for v in variants]
            for j, (a, b) in enumerate(pairs):
                passes[j] += ks_two_sample(draws[a], draws[b]).p_value > 0.01
        worst = min(worst, int(passes.min()))
    return ("representation equivalence", worst >= need,
            f"worst round/pair {worst}/{reps} KS p > 0.01", f">= {need}/{reps} for every round and pair")


@_timed
def check_truncation_bound(quick=False, seed=404):
    """Monte Carlo tail-event probability never exceeds the bound by 3 SE."""
    params = GammaProcessParams(1.0, 1.0, 1.0)
    reps = 5000 if quick else 20_000
    root = SeededRng(seed)
    worst = -math.inf
    for n in (1, 10):
        for rounds in (1, 3, 5):
            est = simulate_tail_event(n, params, rounds, reps, root.substream(n, rounds))
            bound = truncation_bound(n, params, rounds)
            excess = (est.upper - bound) / max(est.std_error, 1e-300)
            worst = max(worst, excess if est.upper > bound else -math.inf)
    passed = worst <= 3.0
    shown = "none above bound" if worst == -math.inf else f"worst excess {worst:.2f} SE"
    return ("truncation bound validity", passed, shown, "<= 3 MC standard errors")


# ---------------------------------------------------------------------------
# variational inference

def random_corpus(rng: SeededRng, vocab_size=12, n_docs=10, rate=1.5) -> Corpus:
    m = rng.poisson(rate, (vocab_size, n_docs))
    m[0, m.sum(axis=0) == 0] = 1
    return Corpus.from_dense(m)


def random_state(corpus: Corpus, n_atoms: int, max_rounds: int, rng: SeededRng) -> vi.VariationalState:
    """A valid variational state with every parameter drawn at random."""
    K, R, N, V = n_atoms, max_rounds, corpus.n_docs, corpus.vocab_size
    g = rng.generator
    phi = g.dirichlet(np.ones(R), K)
    return vi.VariationalState(
        xi=g.uniform(0.5, 5.0, K), eps=g.uniform(0.5, 5.0, K),
        u=g.uniform(0.5, 5.0, K), v=g.uniform(0.5, 5.0, K),
        phi=phi, lam=g.uniform(0.05, 3.0, (N, K)), b=g.uniform(0.05, 2.0, (V, K)),
        kappa1=float(g.uniform(0.5, 5)), kappa2=float(g.uniform(0.5, 5)),
        tau1=float(g.uniform(0.5, 5)), tau2=float(g.uniform(0.5, 5)),
        rho1=float(g.uniform(0.5, 5)), rho2=float(g.uniform(0.5, 5)),
    )


def finite_difference_grad_T(state, corpus, hyper, zeta=1.0, rel_step=1e-5):
    """Central differences of the assembled bound in every ``u_k`` and ``v_k``."""
    out = []
    for name in ("u", "v"):
        base = getattr(state, name)
        grad = np.empty_like(base)
        for k in range(base.size):
            h = rel_step * base[k]
            up, down = state.copy(), state.copy()
            getattr(up, name)[k] += h
            getattr(down, name)[k] -= h
            grad[k] = (vi.elbo(up, corpus, hyper, zeta) - vi.elbo(down, corpus, hyper, zeta)) / (2 * h)
        out.append(grad)
    return tuple(out)


@_timed
def check_gradient_consistency(quick=False, seed=505):
    """grad_T against central differences of the bound at random states."""
    root = SeededRng(seed)
    n_states = 5 if quick else 20
    worst = 0.0
    for s in range(n_states):
        rng = root.substream(s)
        corpus = random_corpus(rng.substream("corpus"))
        hyper = Hyperpriors.symmetric(corpus.vocab_size, 0.3)
        state = random_state(corpus, 6, 5, rng.substream("state"))
        du, dv = vi.grad_T(state)
        fu, fv = finite_difference_grad_T(state, corpus, hyper)
        exact = np.concatenate([du, dv])
        approx = np.concatenate([fu, fv])
        worst = max(worst, float(np.linalg.norm(exact - approx) / np.linalg.norm(approx)))
    return ("gradient consistency", worst <= 1e-4, f"max relative error {worst:.2e}", "<= 1e-4")


@_timed
def check_closed_form_monotonicity(quick=False, seed=606):
    """update_E and update_global never lower the bound."""
    root = SeededRng(seed)
    n_states = 20 if quick else 100
    worst = -math.inf
    for s in range(n_states):
        rng = root.substream(s)
        corpus = random_corpus(rng.substream("corpus"))
        hyper = Hyperpriors.symmetric(corpus.vocab_size, 0.3)
        state = random_state(corpus, 6, 5, rng.substream("state"))
        for update in (vi.update_E, lambda st: vi.update_global(st, hyper)):
            before = vi.elbo(state, corpus, hyper)
            after = vi.elbo(update(state), corpus, hyper)
            worst = max(worst, before - after)
    return ("closed-form monotonicity", worst <= 1e-8,
            f"largest decrease {max(worst, 0.0):.2e}", "<= 1e-8")


def synthetic_problem(seed=11, beta=0.1, vocab_size=50, n_docs=300, split_seed=12):
    """The desk-scale synthetic corpus shared by the convergence and agreement checks."""
    params = GammaProcessParams(1.0, 1.0, 5.0)
    hyper = Hyperpriors.symmetric(vocab_size, beta)
    corpus, truth = generate_synthetic(params, hyper, vocab_size, n_docs, 30, SeededRng(seed))
    train, test = train_test_split(corpus, 0.8, SeededRng(split_seed))
    return params, hyper, train, test, truth


@_timed
def check_synthetic_convergence(quick=False, seed=707):
    """Held-out metric plateaus by iteration 15 across restarts."""
    params, hyper, train, test, _ = synthetic_problem()
    restarts = 3 if quick else 10
    converged = 0
    for r in range(restarts):
        cfg = vi.ViConfig(truncation_atoms=30, max_iters=15, seed=seed + r)
        _, trace = vi.fit(train, test, None, hyper, cfg)
        held = [trace.initial_heldout] + list(trace.heldout)
        deltas = np.abs(np.diff(held))
        run = 0
        for d in deltas:
            run = run + 1 if d < 1e-3 else 0
            if run >= 3:
                converged += 1
                break
    need = math.floor(0.8 * restarts)
    return ("synthetic convergence", converged >= need,
            f"{converged}/{restarts} plateaued by iteration 15", f">= {need}/{restarts}")


@_timed
def check_vi_mcmc_agreement(quick=False, seed=808):
    """Final VI held-out metric against the MCMC average of the last 30 values."""
    params, hyper, train, test, _ = synthetic_problem()
    _, vtrace = vi.fit(train, test, None, hyper, vi.ViConfig(truncation_atoms=30, seed=seed))
    vi_value = vtrace.heldout[-1] if len(vtrace) else vtrace.initial_heldout
    if quick:
        cfg = mcmc.McConfig(mc_samples=300, burn_in=40, n_iters=40, seed=seed)
    else:
        cfg = mcmc.McConfig(mc_samples=1000, burn_in=100, n_iters=60, seed=seed)
    init = mcmc.init_chain(train, 30, hyper, SeededRng(seed).substream("init"))
    _, mtrace = mcmc.run_chain(train, test, init, hyper, cfg)
    mc_value = float(np.mean(mtrace.heldout[-30:]))
    gap = abs(vi_value - mc_value)
    return ("VI-MCMC agreement", gap <= 0.2,
            f"VI {vi_value:.3f}, MCMC {mc_value:.3f}, gap {gap:.3f}", "gap <= 0.2 nats")


# ---------------------------------------------------------------------------
# sampler units

def quadrature_marginal_loglik(z_col, round_index, alpha, c):
    """``log E prod_n Poisson(z_n | g)`` with ``g = E exp(-T)``, ``E ~ Exp(c)``,
    ``T ~ Gamma(round_index, alpha)``; the E integral is closed form."""
    z = np.asarray(z_col, dtype=float)
    total, n = z.sum(), z.size
    const = math.log(c) + special.gammaln(total + 1) - special.gammaln(z + 1).sum()

    def integrand(t):
        log_w = -t
        log_gamma_pdf = (round_index * math.log(alpha) + (round_index - 1) * math.log(t) - alpha * t
                         - special.gammaln(round_index)) if t > 0 else -math.inf
        return math.exp(total * log_w - (total + 1) * math.log(c + n * math.exp(log_w)) + log_gamma_pdf)

    val, _ = integrate.quad(integrand, 0, np.inf, epsabs=0, epsrel=1e-11, limit=400)
    return const + math.log(val)


@_timed
def check_sampler_units(quick=False, seed=909):
    """Thinning conservation, conjugate posterior means and the MC marginal."""
    root = SeededRng(seed)
    notes, ok = [], True

    # thinning conserves every cell
    corpus = random_corpus(root.substream("corpus"), 20, 15, 2.0)
    hyper = Hyperpriors.symmetric(corpus.vocab_size, 0.5)
    state = mcmc.init_chain(corpus, 5, hyper, root.substream("chain"))
    state.z = state.z + 1
    conserved = True
    for r in range(20 if quick else 100):
        alloc = mcmc.thin_counts(corpus, state, root.substream("thin", r))
        conserved &= bool(np.array_equal(alloc.per_cell.sum(axis=1), corpus.counts))
    ok &= conserved
    notes.append("thinning exact" if conserved else "thinning NOT conserved")

    n = 10_000
    # Dirichlet posterior mean
    word_factor = root.substream("alloc").poisson(2.0, (corpus.vocab_size, 3))
    post = hyper.beta[:, None] + word_factor
    draws = np.stack([mcmc.sample_loadings(word_factor, hyper, root.substream("phi", i))
                      for i in range(n)])
    a0 = post.sum(axis=0)
    mean = post / a0
    se = np.sqrt(mean * (1 - mean) / (a0 + 1) / n)
    z_dir = float(np.max(np.abs(draws.mean(axis=0) - mean) / se))
    ok &= z_dir <= 4.0
    notes.append(f"Dirichlet worst z {z_dir:.2f}")

    # gamma mass posterior mean
    chain = mcmc.ChainState(np.ones((4, 3), dtype=np.int64), np.full((2, 4), 0.5),
                            np.array([1, 1, 2, 3]), 1.0, 1.0, 1.0)
    gh = Hyperpriors.symmetric(2, 0.5, b1=2.0, b2=1.5)
    gd = np.array([mcmc.sample_gamma_mass(chain, gh, root.substream("gamma", i)) for i in range(n)])
    shape, rate = gh.b1 + 4, gh.b2 + 3
    z_gam = abs(gd.mean() - shape / rate) / (math.sqrt(shape) / rate / math.sqrt(n))
    ok &= z_gam <= 4.0
    notes.append(f"gamma z {z_gam:.2f}")

    # Monte Carlo marginal against quadrature
    cases = [([0, 1, 0, 2], 1, 1.0, 1.0), ([3, 0, 1], 2, 2.0, 0.5), ([0, 0, 0, 0, 0], 3, 1.5, 2.0)]
    worst = 0.0
    reps = 50 if quick else 200
    for j, (z, i, a, c) in enumerate(cases):
        oracle = quadrature_marginal_loglik(z, i, a, c)
        ests = np.array([mcmc.mc_marginal_loglik(z, i, a, c, 1000, root.substream("mc", j, r))
                         for r in range(reps)])
        worst = max(worst, abs(ests[0] - oracle) / ests.std(ddof=1))
    ok &= worst <= 3.0
    notes.append(f"MC marginal worst {worst:.2f} SE")
    return ("sampler exactness units", ok, ", ".join(notes),
            "exact thinning; |z| <= 4 for posterior means; <= 3 SE for the marginal")


CHECKS = (
    check_construction_moments,
    check_total_mass_law,
    check_representation_equivalence,
    check_truncation_bound,
    check_gradient_consistency,
    check_closed_form_monotonicity,
    check_synthetic_convergence,
    check_vi_mcmc_agreement,
    check_sampler_units,
)


def run_all(quick=False, stream=None):
    """Run every check, writing one line per result to ``stream`` if given."""
    results = []
    for check in CHECKS:
        res = check(quick=quick)
        results.append(res)
        if stream is not None:
            print(res.line(), file=stream, flush=True)
    return results
