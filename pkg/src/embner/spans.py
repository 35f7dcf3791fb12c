"""Candidate entity spans from decoded IOB labels, plus the two repairs.

Single-word false positives are dropped when a token is NE-tagged in under
half of its corpus occurrences and missing from the coarse dictionary.
Adjacent spans merge when the boundary token pair scores as a high-quality
phrase: count(a,b) * n / (count(a) * count(b)) above the threshold
(word2vec's phrase score without discount, default threshold 100).
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import PhraseStats, split_tag

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class Span:
    sentence: int
    start: int
    end: int  # inclusive
    etype: str | None = None

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclass
class SpanSet:
    spans: list[Span]
    # token -> (times tagged B or I, total occurrences), over the whole corpus
    tag_stats: dict[str, tuple[int, int]] = field(default_factory=dict)
    repairs: int = 0


@dataclass
class PhraseFilterConfig:
    threshold: float = 100.0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("phrase threshold must be positive")


def labels_to_spans(labels, sentence: int = 0) -> tuple[list[Span], int]:
    """Maximal B I* runs as spans; a stray I opens a new span (counted)."""
    spans: list[Span] = []
    repairs = 0
    start, cur_type = None, None

    def close(end):
        nonlocal start, cur_type
        if start is not None:
            spans.append(Span(sentence, start, end, cur_type))
        start, cur_type = None, None

    prev_prefix, prev_type = "O", None
    for i, tag in enumerate(labels):
        prefix, etype = split_tag(tag)
        if prefix == "B":
            close(i - 1)
            start, cur_type = i, etype
        elif prefix == "I":
            if start is None or prev_type != etype or prev_prefix == "O":
                repairs += 1
                close(i - 1)
                start, cur_type = i, etype
        else:
            close(i - 1)
        prev_prefix, prev_type = prefix, etype
    close(len(labels) - 1)
    return spans, repairs


def spans_to_labels(spans: list[Span], length: int) -> list[str]:
    """Inverse of labels_to_spans for one sentence."""
    labels = ["O"] * length
    for span in spans:
        suffix = f"-{span.etype}" if span.etype else ""
        labels[span.start] = "B" + suffix
        for i in range(span.start + 1, span.end + 1):
            labels[i] = "I" + suffix
    return labels


def extract_spans(tokens_per_sentence: list[tuple[str, ...]],
                  labels_per_sentence: list[list[str]]) -> SpanSet:
    """Collect spans from every sentence and token-level NE tag statistics."""
    all_spans: list[Span] = []
    repairs = 0
    ne_counts: Counter = Counter()
    totals: Counter = Counter()
    for sid, (tokens, labels) in enumerate(zip(tokens_per_sentence, labels_per_sentence)):
        spans, r = labels_to_spans(labels, sentence=sid)
        repairs += r
        all_spans.extend(spans)
        totals.update(tokens)
        for tok, lab in zip(tokens, labels):
            if split_tag(lab)[0] in ("B", "I"):
                ne_counts[tok] += 1
    if repairs:
        log.info("repaired %d stray I tags while extracting spans", repairs)
    stats = {tok: (ne_counts.get(tok, 0), total) for tok, total in totals.items()}
    return SpanSet(spans=all_spans, tag_stats=stats, repairs=repairs)


def filter_single_word(span_set: SpanSet, dictionary: set[str],
                       tokens_per_sentence: list[tuple[str, ...]]) -> SpanSet:
    """Drop length-1 spans tagged NE in under half their occurrences
    unless the coarse dictionary vouches for the token."""
    kept = []
    for span in span_set.spans:
        if len(span) == 1:
            tok = tokens_per_sentence[span.sentence][span.start]
            ne, total = span_set.tag_stats.get(tok, (0, 0))
            if total > 0 and ne / total < 0.5 and tok not in dictionary:
                continue
        kept.append(span)
    return SpanSet(spans=kept, tag_stats=span_set.tag_stats, repairs=span_set.repairs)


def phrase_score(a: str, b: str, stats: PhraseStats) -> float:
    """Collocation score of the adjacent pair (a, b) from raw corpus counts."""
    ca = stats.unigram_counts.get(a, 0)
    cb = stats.unigram_counts.get(b, 0)
    if ca == 0 or cb == 0:
        return 0.0
    cab = stats.bigram_counts.get((a, b), 0)
    return cab * stats.total_tokens / (ca * cb)


def merge_phrases(span_set: SpanSet, stats: PhraseStats,
                  config: PhraseFilterConfig,
                  tokens_per_sentence: list[tuple[str, ...]]) -> SpanSet:
    """Merge zero-gap adjacent spans whose boundary pair beats the threshold.

    Applied left to right repeatedly until a fixpoint; merged spans keep the
    left span's type.
    """
    by_sentence: dict[int, list[Span]] = {}
    for span in sorted(span_set.spans):
        by_sentence.setdefault(span.sentence, []).append(span)

    merged_all: list[Span] = []
    for sid, spans in sorted(by_sentence.items()):
        tokens = tokens_per_sentence[sid]
        changed = True
        while changed:
            changed = False
            out: list[Span] = []
            i = 0
            while i < len(spans):
                cur = spans[i]
                if i + 1 < len(spans):
                    nxt = spans[i + 1]
                    if cur.end + 1 == nxt.start:
                        score = phrase_score(tokens[cur.end], tokens[nxt.start], stats)
                        if score > config.threshold:
                            cur = Span(sid, cur.start, nxt.end, cur.etype)
                            out.append(cur)
                            i += 2
                            changed = True
                            continue
                out.append(cur)
                i += 1
            spans = out
        merged_all.extend(spans)
    return SpanSet(spans=merged_all, tag_stats=span_set.tag_stats,
                   repairs=span_set.repairs)


def span_representation(span: Span, tokens: tuple[str, ...], embeddings) -> np.ndarray:
    """[first ; mean over the span ; last] embedding concatenation (3d)."""
    vectors = embeddings.matrix(list(tokens[span.start:span.end + 1]))
    return np.concatenate([vectors[0], vectors.mean(axis=0), vectors[-1]])


def write_spans(spans: list[Span], path, with_types: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for span in sorted(spans):
            cols = [str(span.sentence), str(span.start), str(span.end)]
            if with_types:
                cols.append(span.etype or "")
            fh.write("\t".join(cols) + "\n")


def read_spans(path, with_types: bool = False) -> list[Span]:
    spans = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            cols = raw.rstrip("\n").split("\t")
            expected = 4 if with_types else 3
            if len(cols) < expected:
                raise ValueError(f"{path}:{lineno}: expected {expected} columns")
            etype = cols[3] if with_types and cols[3] else None
            spans.append(Span(int(cols[0]), int(cols[1]), int(cols[2]), etype))
    return spans
