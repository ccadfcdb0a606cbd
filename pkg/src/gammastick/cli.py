"""Command-line interface: ``gammastick <command> [flags]``.

Commands
--------
generate   synthetic corpus (UCI bag-of-words) plus a ground-truth dump
bound      truncation bound for given rounds, or the rounds needed for --epsilon
fit-vi     variational fit; writes a CSV trace and a state dump
fit-mcmc   Gibbs sampler; writes a CSV trace and the final state
eval       held-out metric of a saved state on a UCI test corpus
validate   statistical acceptance suite with a pass/fail table

Exit status is 0 on success, 1 when validation fails and 2 on usage or
input errors.  Every file written starts with ``#`` lines recording the
resolved configuration.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, mcmc, validation, vi
from .corpus_io import parse_uci_bow, read_state, write_state, write_trace, write_uci_bow
from .crm import GammaProcessParams
from .errors import DomainError, EvaluationError, ParseError
from .model import Hyperpriors, generate_synthetic, heldout_per_word_loglik, train_test_split
from .numeric import SeededRng
from .truncation import min_rounds_for_error, truncation_bound

# per-command defaults for flags shared across commands
DEFAULTS = {
    "generate": dict(alpha=1.0, c=1.0, gamma=5.0, rounds=30, beta=0.1),
    "fit-vi": dict(K=30, rounds=10, beta=0.1, iters=100, learning_rate=1e-4, grad_steps=5, zeta=1.0),
    "fit-mcmc": dict(alpha=1.0, c=1.0, gamma=1.0, K=30, beta=0.1, iters=30, burn_in=100, mc_samples=1000),
    "bound": dict(alpha=1.0, c=1.0, gamma=1.0),
}


def _common(parser):
    g = parser.add_argument_group("common flags")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--alpha", type=float)
    g.add_argument("--c", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--K", type=int, help="truncation level (VI) or initial atoms (MCMC)")
    g.add_argument("--rounds", type=int)
    g.add_argument("--beta", type=float, help="symmetric Dirichlet parameter on loadings")
    g.add_argument("--iters", type=int)
    g.add_argument("--burn-in", type=int)
    g.add_argument("--mc-samples", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--grad-steps", type=int)
    g.add_argument("--zeta", type=float)
    g.add_argument("--train-frac", type=float, default=0.8)
    g.add_argument("--out", type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gammastick", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus and its ground truth")
    _common(p)
    p.add_argument("--vocab", type=int, default=50)
    p.add_argument("--docs", type=int, default=300)

    p = sub.add_parser("bound", help="truncation bound or minimal rounds")
    _common(p)
    p.add_argument("--n", type=int, required=True, help="number of samples N")
    p.add_argument("--epsilon", type=float, help="target error; prints the minimal rounds")

    for name in ("fit-vi", "fit-mcmc"):
        p = sub.add_parser(name, help=f"{name[4:].upper()} fit of a UCI corpus")
        _common(p)
        p.add_argument("corpus", type=Path, help="UCI bag-of-words file")
        p.add_argument("--test", type=Path, help="held-out UCI file (default: split the corpus)")
        if name == "fit-vi":
            p.add_argument("--update-rule", choices=vi.UPDATE_RULES, default="literal")
        else:
            p.add_argument("--hyper-prior", choices=("flat", "gamma"), default="flat",
                           help="prior on alpha and c (flat is improper in alpha)")

    p = sub.add_parser("eval", help="held-out metric of a saved state")
    p.add_argument("state", type=Path)
    p.add_argument("test", type=Path)

    p = sub.add_parser("validate", help="run the statistical acceptance suite")
    p.add_argument("--quick", action="store_true", help="reduced replications")
    return parser


def _resolve(args) -> dict:
    cfg = {k: v for k, v in vars(args).items()}
    for key, value in DEFAULTS.get(args.command, {}).items():
        if cfg.get(key) is None:
            cfg[key] = value
    return cfg


def _header(cfg: dict) -> list:
    lines = [f"gammastick {__version__} {cfg['command']}"]
    for key in sorted(cfg):
        if key not in ("command", "out") and cfg[key] is not None:
            lines.append(f"{key}={cfg[key]}")
    return lines


def _outdir(cfg) -> Path:
    out = cfg.get("out") or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(cfg):
    corpus = parse_uci_bow(cfg["corpus"])
    if cfg.get("test") is not None:
        test = parse_uci_bow(cfg["test"])
        if (test.vocab_size, test.n_docs) != (corpus.vocab_size, corpus.n_docs):
            raise DomainError("train and test corpora have different dimensions")
        return corpus, test
    return train_test_split(corpus, cfg["train_frac"], SeededRng(cfg["seed"]).substream("split"))


def cmd_generate(cfg, stdout):
    params = GammaProcessParams(cfg["alpha"], cfg["c"], cfg["gamma"])
    hyper = Hyperpriors.symmetric(cfg["vocab"], cfg["beta"])
    corpus, truth = generate_synthetic(params, hyper, cfg["vocab"], cfg["docs"], cfg["rounds"],
                                       SeededRng(cfg["seed"]))
    out = _outdir(cfg)
    header = _header(cfg)
    write_uci_bow(corpus, out / "corpus.txt", header)
    write_state({
        "truth": {"alpha": params.alpha, "c": params.c, "gamma": params.mass,
                  "weights": truth.draw.weights, "rounds": truth.draw.round_indices},
        "model": {"loadings": truth.loadings.values, "counts": truth.counts.values},
    }, out / "truth.txt", header)
    print(f"wrote {corpus.n_docs} documents, {corpus.n_tokens} tokens, "
          f"{truth.counts.n_factors} atoms to {out}", file=stdout)
    return 0


def cmd_bound(cfg, stdout):
    params = GammaProcessParams(cfg["alpha"], cfg["c"], cfg["gamma"])
    if cfg.get("epsilon") is not None:
        print(min_rounds_for_error(cfg["n"], params, cfg["epsilon"]), file=stdout)
    elif cfg.get("rounds") is not None:
        print(repr(truncation_bound(cfg["n"], params, cfg["rounds"])), file=stdout)
    else:
        raise DomainError("bound needs --epsilon or --rounds")
    return 0


def cmd_fit_vi(cfg, stdout):
    train, test = _load_split(cfg)
    hyper = Hyperpriors.symmetric(train.vocab_size, cfg["beta"])
    params0 = None
    if all(cfg.get(k) is not None for k in ("alpha", "c", "gamma")):
        params0 = GammaProcessParams(cfg["alpha"], cfg["c"], cfg["gamma"])
    config = vi.ViConfig(truncation_atoms=cfg["K"], max_rounds=cfg["rounds"],
                         learning_rate=cfg["learning_rate"], grad_steps=cfg["grad_steps"],
                         zeta=cfg["zeta"], max_iters=cfg["iters"], seed=cfg["seed"],
                         update_rule=cfg["update_rule"])
    state, trace = vi.fit(train, test, params0, hyper, config)
    out = _outdir(cfg)
    header = _header(cfg)
    write_trace(trace, out / "trace.csv", header)
    write_state({
        "meta": {"method": "vi", "iterations": len(trace)},
        "model": {"loadings": state.expected_loadings(), "counts": state.expected_counts()},
        "hypers": {"alpha": state.kappa1 / state.kappa2, "c": state.rho1 / state.rho2,
                   "gamma": state.tau1 / state.tau2},
    }, out / "state.txt", header)
    final = trace.heldout[-1] if len(trace) else trace.initial_heldout
    print(f"iterations={len(trace)} heldout_loglik={final:.6f}", file=stdout)
    return 0


def cmd_fit_mcmc(cfg, stdout):
    train, test = _load_split(cfg)
    hyper = Hyperpriors.symmetric(train.vocab_size, cfg["beta"])
    config = mcmc.McConfig(mc_samples=cfg["mc_samples"], burn_in=cfg["burn_in"],
                           n_iters=cfg["iters"], seed=cfg["seed"], hyper_prior=cfg["hyper_prior"])
    init = mcmc.init_chain(train, cfg["K"], hyper, SeededRng(cfg["seed"]).substream("init"),
                           cfg["alpha"], cfg["c"], cfg["gamma"])
    states, trace = mcmc.run_chain(train, test, init, hyper, config)
    out = _outdir(cfg)
    header = _header(cfg)
    write_trace(trace, out / "trace.csv", header)
    last = states[-1] if states else init
    write_state({
        "meta": {"method": "mcmc", "samples": len(states)},
        "model": {"loadings": last.loadings, "counts": last.z},
        "hypers": {"alpha": last.alpha, "c": last.c, "gamma": last.gamma_mass, "rounds": last.d},
    }, out / "state.txt", header)
    if len(trace):
        tail = np.asarray(trace.heldout[-30:], dtype=float)
        print(f"samples={len(trace)} heldout_loglik={trace.heldout[-1]:.6f} "
              f"mean_last_{tail.size}={tail.mean():.6f}", file=stdout)
    else:
        print("samples=0", file=stdout)
    return 0


def cmd_eval(cfg, stdout):
    state = read_state(cfg["state"])
    if "model" not in state or not {"loadings", "counts"} <= set(state["model"]):
        raise ParseError("state file lacks a [model] section with loadings and counts")
    test = parse_uci_bow(cfg["test"])
    value = heldout_per_word_loglik(test, state["model"]["loadings"], state["model"]["counts"])
    print(f"{value:.10g}", file=stdout)
    return 0


def cmd_validate(cfg, stdout):
    mode = "quick" if cfg["quick"] else "full"
    print(f"acceptance suite ({mode})", file=stdout, flush=True)
    results = validation.run_all(quick=cfg["quick"], stream=stdout)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed", file=stdout)
    for r in failed:
        print(f"failed: {r.name}: observed {r.observed}; required {r.required}", file=stdout)
    return 1 if failed else 0


COMMANDS = {
    "generate": cmd_generate, "bound": cmd_bound, "fit-vi": cmd_fit_vi,
    "fit-mcmc": cmd_fit_mcmc, "eval": cmd_eval, "validate": cmd_validate,
}


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout if stdout is not None else sys.stdout
    stderr = stderr if stderr is not None else sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    cfg = _resolve(args)
    try:
        return COMMANDS[args.command](cfg, stdout)
    except (ParseError, DomainError, EvaluationError, FileNotFoundError) as exc:
        print(f"gammastick {args.command}: error: {exc}", file=stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
