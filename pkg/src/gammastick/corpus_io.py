"""File formats: UCI bag-of-words corpora, CSV fit traces and state dumps.

UCI bag-of-words::

    D            number of documents
    W            vocabulary size
    NNZ          number of nonzero entries
    docID wordID count      (NNZ lines, 1-based ids)

Lines starting with ``#`` before the header are treated as comments, which
lets files written here carry their generating configuration.

State dumps are plain text made of ``[section]`` headers followed by
``key=value`` lines.  Arrays are stored as two keys, ``name.shape`` (comma
separated) and ``name`` (whitespace separated values in C order).
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from .errors import ParseError
from .model import Corpus

TRACE_COLUMNS = ("iteration", "elapsed_seconds", "elbo", "heldout_loglik")


def _open_text(path_or_file, mode):
    if hasattr(path_or_file, "read") or hasattr(path_or_file, "write"):
        return path_or_file, False
    return open(path_or_file, mode, encoding="utf-8", newline=""), True


# ---------------------------------------------------------------------------
# UCI bag-of-words

def parse_uci_bow(path) -> Corpus:
    fh, owned = _open_text(path, "r")
    try:
        lines = fh.read().splitlines()
    finally:
        if owned:
            fh.close()

    header = []
    body_start = None
    for i, raw in enumerate(lines):
        line = raw.strip()
        if not header and (not line or line.startswith("#")):
            continue
        if len(header) < 3:
            if not line:
                raise ParseError("blank line inside the header", i + 1)
            try:
                value = int(line)
            except ValueError:
                raise ParseError(f"header value {line!r} is not an integer", i + 1) from None
            if value < 0 or (len(header) < 2 and value < 1):
                raise ParseError(f"header value {value} out of range", i + 1)
            header.append(value)
            if len(header) == 3:
                body_start = i + 1
                break
    if len(header) < 3:
        raise ParseError(f"expected 3 header lines (D, W, NNZ), found {len(header)}")
    n_docs, vocab, nnz = header

    docs, words, counts = [], [], []
    seen = set()
    for i in range(body_start, len(lines)):
        line = lines[i].strip()
        if not line:
            continue
        lineno = i + 1
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"expected 'docID wordID count', found {line!r}", lineno)
        try:
            d, w, c = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"non-integer field in {line!r}", lineno) from None
        if not 1 <= d <= n_docs:
            raise ParseError(f"docID {d} outside 1..{n_docs}", lineno)
        if not 1 <= w <= vocab:
            raise ParseError(f"wordID {w} outside 1..{vocab}", lineno)
        if c <= 0:
            raise ParseError(f"count must be positive, got {c}", lineno)
        if (d, w) in seen:
            raise ParseError(f"duplicate entry for docID {d}, wordID {w}", lineno)
        seen.add((d, w))
        docs.append(d - 1)
        words.append(w - 1)
        counts.append(c)
    if len(counts) != nnz:
        raise ParseError(f"header declares NNZ={nnz} entries but found {len(counts)}")
    return Corpus(vocab, n_docs, np.array(words, dtype=np.int64),
                  np.array(docs, dtype=np.int64), np.array(counts, dtype=np.int64))


def write_uci_bow(corpus: Corpus, path, header_lines=()) -> None:
    fh, owned = _open_text(path, "w")
    try:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(f"{corpus.n_docs}\n{corpus.vocab_size}\n{corpus.nnz}\n")
        for w, d, c in zip(corpus.words.tolist(), corpus.docs.tolist(), corpus.counts.tolist()):
            fh.write(f"{d + 1} {w + 1} {c}\n")
    finally:
        if owned:
            fh.close()


# ---------------------------------------------------------------------------
# traces

def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.10g}"


def write_trace(trace, path, header_lines=()) -> None:
    """Write one CSV row per iteration; the elbo column is blank when absent."""
    fh, owned = _open_text(path, "w")
    try:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for i, (e, h, t) in enumerate(zip(trace.elbo, trace.heldout, trace.elapsed_seconds), start=1):
            writer.writerow([i, _fmt(t), _fmt(e), _fmt(h)])
    finally:
        if owned:
            fh.close()


def read_trace(path) -> dict:
    """Parse a trace CSV into column lists (blank cells become None)."""
    fh, owned = _open_text(path, "r")
    try:
        rows = [line for line in fh.read().splitlines() if line and not line.startswith("#")]
    finally:
        if owned:
            fh.close()
    reader = csv.reader(rows)
    header = next(reader, None)
    if header is None or tuple(header) != TRACE_COLUMNS:
        raise ParseError(f"trace header must be {','.join(TRACE_COLUMNS)}")
    out = {name: [] for name in TRACE_COLUMNS}
    for row in reader:
        out["iteration"].append(int(row[0]))
        for name, cell in zip(TRACE_COLUMNS[1:], row[1:]):
            out[name].append(float(cell) if cell else None)
    return out


# ---------------------------------------------------------------------------
# state dumps

def write_state(sections: dict, path, header_lines=()) -> None:
    """Write ``{section: {key: scalar | str | ndarray}}`` as key=value text."""
    fh, owned = _open_text(path, "w")
    try:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for name, block in sections.items():
            fh.write(f"[{name}]\n")
            for key, value in block.items():
                if isinstance(value, np.ndarray):
                    fh.write(f"{key}.shape={','.join(str(s) for s in value.shape)}\n")
                    flat = value.ravel()
                    if np.issubdtype(value.dtype, np.integer):
                        text = " ".join(str(int(x)) for x in flat)
                    else:
                        text = " ".join(repr(float(x)) for x in flat)
                    fh.write(f"{key}={text}\n")
                else:
                    fh.write(f"{key}={value!r}\n" if isinstance(value, float) else f"{key}={value}\n")
    finally:
        if owned:
            fh.close()


def read_state(path) -> dict:
    fh, owned = _open_text(path, "r")
    try:
        lines = fh.read().splitlines()
    finally:
        if owned:
            fh.close()
    sections: dict = {}
    current = None
    raw: dict = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = {}
            raw[current] = {}
            continue
        if current is None or "=" not in line:
            raise ParseError(f"expected a [section] or key=value line, found {line!r}", lineno)
        key, value = line.split("=", 1)
        raw[current][key] = value
    for name, block in raw.items():
        for key, value in block.items():
            if key.endswith(".shape"):
                continue
            if f"{key}.shape" in block:
                shape = tuple(int(s) for s in block[f"{key}.shape"].split(",") if s)
                tokens = value.split()
                is_int = all(t.lstrip("-").isdigit() for t in tokens)
                arr = np.array([int(t) for t in tokens] if is_int else [float(t) for t in tokens],
                               dtype=np.int64 if is_int else float)
                sections[name][key] = arr.reshape(shape)
            else:
                sections[name][key] = _scalar(value)
    return sections


def _scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def dumps_state(sections: dict) -> str:
    buf = io.StringIO()
    write_state(sections, buf)
    return buf.getvalue()


def ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
