"""Corpus and embedding ingestion plus co-occurrence statistics.

File formats:
  * embeddings: plain text, optional ``count dim`` header, then
    ``token v1 ... vd`` per line (whitespace separated, UTF-8).
  * corpus: CoNLL column text, blank lines between sentences. CoNLL-2003
    English keeps tokens in column 0 and NE tags in column 3; CoNLL-2002
    Spanish uses columns 0 and 1.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

_DIGITS = str.maketrans("123456789", "000000000")


class ParseError(ValueError):
    """Malformed input file; message always carries the line number."""


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    labels: tuple[str, ...] | None = None

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    sentences: list[Sentence]
    repaired_labels: int = 0  # stray I-X continuations normalized to B-X

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    @property
    def has_labels(self) -> bool:
        return all(s.labels is not None for s in self.sentences)

    def vocabulary(self) -> set[str]:
        return {tok for sent in self.sentences for tok in sent.tokens}

    def with_labels(self, label_seqs: list[list[str]]) -> "Corpus":
        """Same tokens, new labels; shapes must match."""
        if len(label_seqs) != len(self.sentences):
            raise ValueError(
                f"label sequences ({len(label_seqs)}) != sentences ({len(self.sentences)})")
        out = []
        for sent, labels in zip(self.sentences, label_seqs):
            if len(labels) != len(sent.tokens):
                raise ValueError("label sequence length mismatch")
            out.append(Sentence(sent.tokens, tuple(labels)))
        return Corpus(out)


class EmbeddingTable:
    """token -> dense float vector of fixed dimension.

    Lookup never fails: exact match, then lowercase, then digit-folded,
    then the fallback vector (component-wise mean of all stored vectors).
    """

    def __init__(self, dim: int, entries: dict[str, np.ndarray],
                 lowercase_fallback: bool = True):
        if dim <= 0:
            raise ValueError("embedding dimension must be positive")
        self.dim = dim
        self.entries = entries
        self.lowercase_fallback = lowercase_fallback
        for tok, vec in entries.items():
            if vec.shape != (dim,) or not np.all(np.isfinite(vec)):
                raise ValueError(f"bad embedding vector for token {tok!r}")
        if entries:
            self._fallback = np.mean(np.stack(list(entries.values())), axis=0)
        else:
            self._fallback = np.zeros(dim)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    @property
    def fallback_vector(self) -> np.ndarray:
        return self._fallback

    def lookup(self, token: str) -> np.ndarray:
        if token in self.entries:
            return self.entries[token]
        if self.lowercase_fallback:
            lower = token.lower()
            if lower in self.entries:
                return self.entries[lower]
            folded = lower.translate(_DIGITS)
            if folded in self.entries:
                return self.entries[folded]
        return self._fallback

    def matrix(self, tokens: list[str]) -> np.ndarray:
        """Stacked lookups, one row per token."""
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self.lookup(t) for t in tokens])


@dataclass
class PhraseStats:
    unigram_counts: Counter = field(default_factory=Counter)
    bigram_counts: Counter = field(default_factory=Counter)
    total_tokens: int = 0


def load_embeddings(path, lowercase_fallback: bool = True) -> EmbeddingTable:
    """Parse a text embedding file; header line ``count dim`` is optional."""
    entries: dict[str, np.ndarray] = {}
    dim = None
    declared = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2:
                try:
                    declared = (int(parts[0]), int(parts[1]))
                    continue
                except ValueError:
                    pass  # a 1-D embedding line, not a header
            token, comps = parts[0], parts[1:]
            try:
                vec = np.array([float(c) for c in comps])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric component: {exc}") from None
            if dim is None:
                dim = len(vec)
                if dim == 0:
                    raise ParseError(f"{path}:{lineno}: no vector components")
            elif len(vec) != dim:
                raise ParseError(
                    f"{path}:{lineno}: dimension mismatch, expected {dim} got {len(vec)}")
            if not np.all(np.isfinite(vec)):
                raise ParseError(f"{path}:{lineno}: non-finite component")
            entries[token] = vec
    if dim is None:
        raise ParseError(f"{path}:1: empty embedding file")
    if declared is not None:
        count_decl, dim_decl = declared
        if dim_decl != dim:
            raise ParseError(f"{path}:1: header dim {dim_decl} != actual {dim}")
        if count_decl != len(entries):
            raise ParseError(f"{path}:1: header count {count_decl} != actual {len(entries)}")
    return EmbeddingTable(dim, entries, lowercase_fallback=lowercase_fallback)


def split_tag(tag: str) -> tuple[str, str | None]:
    """'B-ORG' -> ('B', 'ORG'); 'O' -> ('O', None); bare 'B' -> ('B', None)."""
    if tag == "O":
        return "O", None
    if "-" in tag:
        prefix, etype = tag.split("-", 1)
        return prefix, etype
    return tag, None


def _normalize_iob(labels: list[str]) -> tuple[list[str], int]:
    """Turn stray I-X continuations (IOB1 style) into B-X; count repairs."""
    repaired = 0
    out: list[str] = []
    prev_prefix, prev_type = "O", None
    for tag in labels:
        prefix, etype = split_tag(tag)
        if prefix == "I" and (prev_prefix == "O" or prev_type != etype):
            tag = "B" if etype is None else f"B-{etype}"
            prefix = "B"
            repaired += 1
        elif prefix not in ("O", "B", "I"):
            raise ParseError(f"unknown tag prefix in {tag!r}")
        out.append(tag)
        prev_prefix, prev_type = prefix, etype
    return out, repaired


def load_conll(path, token_column: int = 0, label_column: int | None = None) -> Corpus:
    """Read a column-format corpus; ``-DOCSTART-`` sentinel sentences dropped."""
    sentences: list[Sentence] = []
    tokens: list[str] = []
    labels: list[str] = []
    repaired_total = 0

    def flush():
        nonlocal tokens, labels, repaired_total
        if tokens:
            if tokens[0] != "-DOCSTART-":
                if label_column is not None:
                    fixed, repaired = _normalize_iob(labels)
                    repaired_total += repaired
                    sentences.append(Sentence(tuple(tokens), tuple(fixed)))
                else:
                    sentences.append(Sentence(tuple(tokens), None))
            tokens, labels = [], []

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                flush()
                continue
            cols = line.split()
            needed = max(token_column, label_column if label_column is not None else 0)
            if len(cols) <= needed:
                raise ParseError(
                    f"{path}:{lineno}: expected at least {needed + 1} columns, got {len(cols)}")
            tokens.append(cols[token_column])
            if label_column is not None:
                labels.append(cols[label_column])
    flush()
    return Corpus(sentences, repaired_labels=repaired_total)


def write_conll(corpus: Corpus, predicted: list[list[str]], path) -> None:
    """Write token + predicted label columns; validates shapes before writing."""
    if len(predicted) != len(corpus.sentences):
        raise ValueError(
            f"predicted sequences ({len(predicted)}) != sentences ({len(corpus.sentences)})")
    for i, (sent, labels) in enumerate(zip(corpus.sentences, predicted)):
        if len(labels) != len(sent.tokens):
            raise ValueError(
                f"sentence {i}: {len(labels)} labels for {len(sent.tokens)} tokens")
    with open(path, "w", encoding="utf-8") as fh:
        for sent, labels in zip(corpus.sentences, predicted):
            for tok, lab in zip(sent.tokens, labels):
                fh.write(f"{tok} {lab}\n")
            fh.write("\n")


def collect_stats(corpus: Corpus) -> PhraseStats:
    """Unigram/adjacent-bigram counts; bigrams never cross sentence boundaries."""
    stats = PhraseStats()
    for sent in corpus.sentences:
        stats.unigram_counts.update(sent.tokens)
        stats.bigram_counts.update(zip(sent.tokens, sent.tokens[1:]))
        stats.total_tokens += len(sent.tokens)
    return stats
