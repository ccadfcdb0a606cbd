"""Command-line entry points and their exit codes."""

import io

import numpy as np
import pytest

from gammastick.cli import main
from gammastick.corpus_io import parse_uci_bow, read_state, read_trace


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def test_bound_minimal_rounds():
    code, out, _ = run("bound", "--n", "1000", "--alpha", "1", "--c", "1", "--gamma", "1", "--epsilon", "0.01")
    assert code == 0 and out.strip() == "17"


def test_bound_value():
    code, out, _ = run("bound", "--n", "1", "--rounds", "0")
    assert code == 0 and float(out) == pytest.approx(0.6321205588, abs=1e-10)


def test_bound_needs_a_target():
    code, _, err = run("bound", "--n", "5")
    assert code == 2 and "error" in err


def test_usage_errors_exit_2(capsys):
    assert run("frobnicate")[0] == 2
    assert run("bound")[0] == 2
    assert run("bound", "--n", "5", "--epsilon", "2")[0] == 2


def test_missing_file_exits_2(tmp_path):
    code, _, err = run("fit-vi", str(tmp_path / "nope.txt"))
    assert code == 2 and "nope.txt" in err


def test_malformed_corpus_exits_2(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("2\n3\n1\n1 9 5\n")
    code, _, err = run("fit-mcmc", str(bad))
    assert code == 2 and "line 4" in err


def test_generate_is_byte_identical(tmp_path):
    args = ["generate", "--seed", "7", "--vocab", "20", "--docs", "30", "--gamma", "3"]
    assert run(*args, "--out", str(tmp_path / "a"))[0] == 0
    assert run(*args, "--out", str(tmp_path / "b"))[0] == 0
    for name in ("corpus.txt", "truth.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    text = (tmp_path / "a" / "corpus.txt").read_text()
    assert text.startswith("# gammastick 0.1.0 generate") and "# seed=7" in text
    corpus = parse_uci_bow(tmp_path / "a" / "corpus.txt")
    assert (corpus.vocab_size, corpus.n_docs) == (20, 30)


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run("generate", "--seed", "3", "--vocab", "15", "--docs", "25", "--gamma", "3",
               "--out", str(out))[0] == 0
    return out / "corpus.txt"


def test_fit_vi_writes_trace_and_state(corpus_file, tmp_path):
    code, out, _ = run("fit-vi", str(corpus_file), "--K", "6", "--rounds", "3", "--iters", "4",
                       "--seed", "1", "--out", str(tmp_path))
    assert code == 0 and "heldout_loglik=" in out
    trace = read_trace(tmp_path / "trace.csv")
    assert trace["iteration"] == [1, 2, 3, 4]
    assert all(e is not None for e in trace["elbo"])
    state = read_state(tmp_path / "state.txt")
    assert state["model"]["loadings"].shape[1] == state["model"]["counts"].shape[0] == 6


def test_fit_mcmc_and_eval(corpus_file, tmp_path):
    code, out, _ = run("fit-mcmc", str(corpus_file), "--K", "4", "--iters", "3", "--burn-in", "2",
                       "--mc-samples", "30", "--seed", "2", "--hyper-prior", "gamma", "--out", str(tmp_path))
    assert code == 0 and "samples=3" in out
    trace = read_trace(tmp_path / "trace.csv")
    assert trace["elbo"] == [None] * 3
    assert "# hyper_prior=gamma" in (tmp_path / "trace.csv").read_text()
    # eval on the training file itself gives a finite per-word value
    code, out, _ = run("eval", str(tmp_path / "state.txt"), str(corpus_file))
    assert code == 0 and np.isfinite(float(out))


def test_eval_rejects_state_without_model(tmp_path, corpus_file):
    state = tmp_path / "s.txt"
    state.write_text("[meta]\nmethod=vi\n")
    code, _, err = run("eval", str(state), str(corpus_file))
    assert code == 2 and "[model]" in err


@pytest.mark.slow
def test_validate_quick_reports_every_check():
    code, out, _ = run("validate", "--quick")
    lines = [line for line in out.splitlines() if line.startswith(("PASS", "FAIL"))]
    assert len(lines) == 9
    assert code == (0 if all(line.startswith("PASS") for line in lines) else 1)
