"""Canonical corpora of integer API-call traces.

A corpus is an immutable collection of labeled traces plus the size of the
call-id space they are drawn from. Parsing, canonicalization, splitting and
rebalancing all return new corpora; nothing mutates in place, so corpora are
safe to share across workers.

Canonical on-disk format (UTF-8, LF):
    #vocab=<int>              optional first line
    <label>,<id>,<id>,...     one trace per line, label in {0, 1, -}

The jsonl format carries one object per line with fields ``id`` (text),
``label`` (0/1/null) and ``calls`` (array of ints).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO

import numpy as np

GOODWARE = 0
MALWARE = 1

DEFAULT_MAX_LEN = 100


class CorpusError(ValueError):
    """Malformed corpus data or an operation applied to an unfit corpus."""


@dataclass(frozen=True)
class LabeledTrace:
    """One process run: an ordered, non-empty sequence of integer call ids."""

    id: str
    calls: tuple[int, ...]
    label: int | None = None

    def __len__(self) -> int:
        return len(self.calls)


@dataclass(frozen=True)
class Corpus:
    traces: tuple[LabeledTrace, ...]
    vocabulary_size: int
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for t in self.traces:
            if t.label is not None:
                counts[t.label] = counts.get(t.label, 0) + 1
        return counts

    def content(self) -> list[tuple[int | None, tuple[int, ...]]]:
        """Label/call pairs, ignoring synthetic trace ids and provenance."""
        return [(t.label, t.calls) for t in self.traces]


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    seed: int = 42
    stratified: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.test_fraction < 1.0:
            raise CorpusError(f"test_fraction must be in (0,1), got {self.test_fraction}")


def _parse_label(token: str, where: str) -> int | None:
    if token == "-":
        return None
    if token in ("0", "1"):
        return int(token)
    raise CorpusError(f"{where}: label must be 0, 1 or '-', got {token!r}")


def _as_text_lines(source) -> list[str]:
    if isinstance(source, Path):
        raise TypeError("parse_corpus takes a stream or text, not a path; use load_corpus")
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    return text.split("\n")


def parse_corpus(source: str | bytes | IO, format: str = "canonical_csv",
                 provenance: str = "") -> Corpus:
    """Parse a corpus from canonical CSV or jsonl content.

    The vocabulary size is the declared ``#vocab=`` header when present,
    otherwise one plus the largest call id seen.
    """
    if format not in ("canonical_csv", "jsonl"):
        raise CorpusError(f"unknown corpus format {format!r}")
    lines = _as_text_lines(source)

    traces: list[LabeledTrace] = []
    declared_vocab: int | None = None
    max_id = -1
    row = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if format == "canonical_csv" and line.startswith("#"):
            if row == 0 and line.startswith("#vocab=") and declared_vocab is None:
                try:
                    declared_vocab = int(line[len("#vocab="):])
                except ValueError:
                    raise CorpusError(f"line {lineno}: bad vocabulary header {line!r}")
                if declared_vocab < 1:
                    raise CorpusError(f"line {lineno}: vocabulary size must be >= 1")
                continue
            raise CorpusError(f"line {lineno}: unexpected comment line {line!r}")
        row += 1
        where = f"line {lineno}"
        if format == "canonical_csv":
            fields = line.split(",")
            label = _parse_label(fields[0].strip(), where)
            call_tokens = fields[1:]
            if not call_tokens or call_tokens == [""]:
                raise CorpusError(f"{where}: empty sequence")
            try:
                calls = tuple(int(tok) for tok in call_tokens)
            except ValueError:
                raise CorpusError(f"{where}: malformed call id")
            trace_id = f"t{row}"
        else:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: malformed json ({exc.msg})")
            if not isinstance(obj, dict) or "calls" not in obj:
                raise CorpusError(f"{where}: object must carry a 'calls' field")
            raw_calls = obj["calls"]
            if not isinstance(raw_calls, list) or not raw_calls:
                raise CorpusError(f"{where}: empty sequence")
            if not all(isinstance(c, int) and not isinstance(c, bool) for c in raw_calls):
                raise CorpusError(f"{where}: calls must be integers")
            calls = tuple(raw_calls)
            raw_label = obj.get("label")
            if raw_label not in (None, 0, 1):
                raise CorpusError(f"{where}: label must be 0, 1 or null")
            label = raw_label
            trace_id = str(obj.get("id") or f"t{row}")
        if any(c < 0 for c in calls):
            raise CorpusError(f"{where}: negative call id")
        max_id = max(max_id, max(calls))
        traces.append(LabeledTrace(id=trace_id, calls=calls, label=label))

    if not traces:
        raise CorpusError("no traces")
    if declared_vocab is not None and max_id >= declared_vocab:
        raise CorpusError(
            f"call id {max_id} exceeds declared vocabulary size {declared_vocab}")
    vocab = declared_vocab if declared_vocab is not None else max_id + 1
    return Corpus(traces=tuple(traces), vocabulary_size=vocab, provenance=provenance)


def serialize_corpus(corpus: Corpus, format: str = "canonical_csv") -> str:
    if format == "canonical_csv":
        out = [f"#vocab={corpus.vocabulary_size}"]
        for t in corpus.traces:
            label = "-" if t.label is None else str(t.label)
            out.append(label + "," + ",".join(str(c) for c in t.calls))
        return "\n".join(out) + "\n"
    if format == "jsonl":
        out = []
        for t in corpus.traces:
            out.append(json.dumps(
                {"id": t.id, "label": t.label, "calls": list(t.calls)},
                separators=(",", ":")))
        return "\n".join(out) + "\n"
    raise CorpusError(f"unknown corpus format {format!r}")


def load_corpus(path: str | Path, format: str = "canonical_csv") -> Corpus:
    # provenance keeps the file name only, so artifacts derived from the
    # corpus stay byte-identical across working directories
    text = Path(path).read_text(encoding="utf-8")
    return parse_corpus(text, format=format, provenance=Path(path).name)


def save_corpus(corpus: Corpus, path: str | Path, format: str = "canonical_csv") -> None:
    Path(path).write_text(serialize_corpus(corpus, format=format), encoding="utf-8")


def collapse_consecutive_repeats(trace: LabeledTrace) -> LabeledTrace:
    """Drop every call equal to its immediate predecessor."""
    if not trace.calls:
        raise CorpusError("trace has no calls")
    kept = [trace.calls[0]]
    for c in trace.calls[1:]:
        if c != kept[-1]:
            kept.append(c)
    if len(kept) == len(trace.calls):
        return trace
    return replace(trace, calls=tuple(kept))


def truncate_prefix(trace: LabeledTrace, max_len: int) -> LabeledTrace:
    """Keep only the first max_len calls."""
    if max_len < 2:
        raise CorpusError(f"max_len must be >= 2, got {max_len}")
    if len(trace.calls) <= max_len:
        return trace
    return replace(trace, calls=trace.calls[:max_len])


def canonicalize(corpus: Corpus, collapse: bool = True,
                 max_len: int = DEFAULT_MAX_LEN) -> Corpus:
    """Apply repeat collapsing and prefix truncation to every trace."""
    traces = []
    for t in corpus.traces:
        if collapse:
            t = collapse_consecutive_repeats(t)
        traces.append(truncate_prefix(t, max_len))
    return replace(corpus, traces=tuple(traces))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus]:
    """Split into train/test corpora; per-class test counts are
    round(class_count * test_fraction) when stratified.

    Deterministic under the split seed. Trace order within each side follows
    the input corpus.
    """
    n = len(corpus)
    if n < 2:
        raise CorpusError("need at least 2 traces to split")
    rng = np.random.default_rng(spec.seed)
    test_idx: set[int] = set()
    if spec.stratified:
        by_class: dict[int, list[int]] = {}
        for i, t in enumerate(corpus.traces):
            if t.label is None:
                raise CorpusError("stratified split requires every trace to be labeled")
            by_class.setdefault(t.label, []).append(i)
        for label in sorted(by_class):
            members = by_class[label]
            k = _round_half_up(len(members) * spec.test_fraction)
            if k < 1 or k >= len(members):
                raise CorpusError(
                    f"class {label} has {len(members)} traces, too few to stratify "
                    f"at test_fraction={spec.test_fraction}")
            order = rng.permutation(len(members))
            test_idx.update(members[j] for j in order[:k])
    else:
        k = _round_half_up(n * spec.test_fraction)
        if k < 1 or k >= n:
            raise CorpusError("test_fraction leaves one side empty")
        order = rng.permutation(n)
        test_idx.update(int(j) for j in order[:k])

    train = tuple(t for i, t in enumerate(corpus.traces) if i not in test_idx)
    test = tuple(t for i, t in enumerate(corpus.traces) if i in test_idx)
    base = corpus.provenance or "corpus"
    return (
        replace(corpus, traces=train, provenance=f"{base}/train"),
        replace(corpus, traces=test, provenance=f"{base}/test"),
    )


def random_oversample(corpus: Corpus, seed: int) -> Corpus:
    """Balance a two-class corpus by duplicating minority traces with
    replacement until both class counts match the majority count.

    All original traces are retained in order; duplicates are appended.
    """
    counts = corpus.class_counts()
    if sum(counts.values()) != len(corpus):
        raise CorpusError("oversampling requires every trace to be labeled")
    if len(counts) != 2:
        raise CorpusError(f"oversampling requires exactly two classes, found {len(counts)}")
    (minority, n_min), (_, n_maj) = sorted(counts.items(), key=lambda kv: kv[1])
    if n_min == n_maj:
        return corpus
    pool = [t for t in corpus.traces if t.label == minority]
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(pool), size=n_maj - n_min)
    extra = tuple(pool[int(i)] for i in picks)
    return replace(corpus, traces=corpus.traces + extra)


# --- adapters for upstream dataset files ------------------------------------

def convert_wide_csv(text: str, label_col: str, call_prefix: str,
                     id_col: str | None = None, positive_value: str = "1",
                     vocabulary_size: int | None = None) -> Corpus:
    """Adapt a wide CSV (one call per column, columns named
    ``<call_prefix>0..<call_prefix>N``) into a canonical corpus."""
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise CorpusError("no traces")
    header = [h.strip() for h in lines[0].split(",")]
    try:
        label_pos = header.index(label_col)
    except ValueError:
        raise CorpusError(f"label column {label_col!r} not in header")
    id_pos = header.index(id_col) if id_col and id_col in header else None
    call_pos = [(int(h[len(call_prefix):]), i) for i, h in enumerate(header)
                if h.startswith(call_prefix) and h[len(call_prefix):].isdigit()]
    if not call_pos:
        raise CorpusError(f"no call columns with prefix {call_prefix!r}")
    call_pos.sort()
    traces = []
    for row, line in enumerate(lines[1:], start=1):
        fields = line.split(",")
        if len(fields) != len(header):
            raise CorpusError(f"line {row + 1}: expected {len(header)} fields")
        label = 1 if fields[label_pos].strip() == positive_value else 0
        calls = tuple(int(fields[i]) for _, i in call_pos)
        trace_id = fields[id_pos].strip() if id_pos is not None else f"t{row}"
        traces.append(LabeledTrace(id=trace_id, calls=calls, label=label))
    max_id = max(max(t.calls) for t in traces)
    vocab = vocabulary_size if vocabulary_size is not None else max_id + 1
    if max_id >= vocab:
        raise CorpusError(f"call id {max_id} exceeds vocabulary size {vocab}")
    return Corpus(traces=tuple(traces), vocabulary_size=vocab, provenance="wide_csv")


def convert_seq_csv(text: str, seq_col: str, delimiter: str = " ",
                    label_col: str | None = None, constant_label: int | None = 1,
                    id_col: str | None = None,
                    vocabulary_size: int | None = None) -> Corpus:
    """Adapt a CSV carrying each trace as one delimited string column."""
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise CorpusError("no traces")
    header = [h.strip() for h in lines[0].split(",")]
    try:
        seq_pos = header.index(seq_col)
    except ValueError:
        raise CorpusError(f"sequence column {seq_col!r} not in header")
    label_pos = header.index(label_col) if label_col and label_col in header else None
    id_pos = header.index(id_col) if id_col and id_col in header else None
    traces = []
    for row, line in enumerate(lines[1:], start=1):
        fields = line.split(",")
        tokens = fields[seq_pos].strip().split(delimiter)
        calls = tuple(int(tok) for tok in tokens if tok)
        if not calls:
            raise CorpusError(f"line {row + 1}: empty sequence")
        if label_pos is not None:
            label = _parse_label(fields[label_pos].strip(), f"line {row + 1}")
        else:
            label = constant_label
        trace_id = fields[id_pos].strip() if id_pos is not None else f"t{row}"
        traces.append(LabeledTrace(id=trace_id, calls=calls, label=label))
    max_id = max(max(t.calls) for t in traces)
    vocab = vocabulary_size if vocabulary_size is not None else max_id + 1
    if max_id >= vocab:
        raise CorpusError(f"call id {max_id} exceeds vocabulary size {vocab}")
    return Corpus(traces=tuple(traces), vocabulary_size=vocab, provenance="seq_csv")
