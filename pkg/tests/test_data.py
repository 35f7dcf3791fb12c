import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pytest import approx

from embner.data import (
    Corpus,
    ParseError,
    Sentence,
    collect_stats,
    load_conll,
    load_embeddings,
    write_conll,
)


def test_load_embeddings_plain(tmp_path):
    p = tmp_path / "emb.txt"
    p.write_text("a 1.0 2.0\nb 0.0 -1.0\n")
    table = load_embeddings(p)
    assert table.dim == 2
    assert len(table) == 2
    assert table.lookup("a") == approx(np.array([1.0, 2.0]))
    assert table.lookup("b") == approx(np.array([0.0, -1.0]))


def test_load_embeddings_with_header(tmp_path):
    plain = tmp_path / "plain.txt"
    plain.write_text("a 1.0 2.0\nb 0.0 -1.0\n")
    headed = tmp_path / "headed.txt"
    headed.write_text("2 2\na 1.0 2.0\nb 0.0 -1.0\n")
    t1, t2 = load_embeddings(plain), load_embeddings(headed)
    assert t1.dim == t2.dim
    assert set(t1.entries) == set(t2.entries)
    for tok in t1.entries:
        assert t1.entries[tok] == approx(t2.entries[tok])


def test_load_embeddings_dimension_mismatch_names_line(tmp_path):
    p = tmp_path / "emb.txt"
    p.write_text("a 1.0\nb 1.0 2.0\n")
    with pytest.raises(ParseError, match=":2"):
        load_embeddings(p)


def test_load_embeddings_non_numeric_names_line(tmp_path):
    p = tmp_path / "emb.txt"
    p.write_text("a 1.0 2.0\nb x 2.0\n")
    with pytest.raises(ParseError, match=":2"):
        load_embeddings(p)


def test_load_embeddings_bad_header_count(tmp_path):
    p = tmp_path / "emb.txt"
    p.write_text("3 2\na 1.0 2.0\nb 0.0 1.0\n")
    with pytest.raises(ParseError, match="header count"):
        load_embeddings(p)


def test_oov_lookup_chain(tmp_path):
    p = tmp_path / "emb.txt"
    p.write_text("cat 1.0 0.0\n00 0.0 1.0\n")
    table = load_embeddings(p)
    # lowercase fallback
    assert table.lookup("Cat") == approx(np.array([1.0, 0.0]))
    # digit folding
    assert table.lookup("42") == approx(np.array([0.0, 1.0]))
    # mean fallback, never fails
    assert table.lookup("zzz") == approx(np.array([0.5, 0.5]))


def test_load_conll_basic(tmp_path):
    p = tmp_path / "c.conll"
    p.write_text("EU B-ORG\nrejects O\n\n")
    corpus = load_conll(p, 0, 1)
    assert len(corpus) == 1
    assert corpus.sentences[0].tokens == ("EU", "rejects")
    assert corpus.sentences[0].labels == ("B-ORG", "O")


def test_load_conll_without_labels(tmp_path):
    p = tmp_path / "c.conll"
    p.write_text("EU B-ORG\nrejects O\n\n")
    corpus = load_conll(p, 0)
    assert corpus.sentences[0].labels is None


def test_load_conll_two_sentences(tmp_path):
    p = tmp_path / "c.conll"
    p.write_text("a O\nb O\n\nc O\n\n")
    assert len(load_conll(p, 0, 1)) == 2


def test_load_conll_drops_docstart(tmp_path):
    p = tmp_path / "c.conll"
    p.write_text("-DOCSTART- -X- -X- O\n\nEU NNP I-NP B-ORG\n\n")
    corpus = load_conll(p, 0, 3)
    assert len(corpus) == 1
    assert corpus.sentences[0].tokens == ("EU",)


def test_load_conll_ragged_row_names_line(tmp_path):
    p = tmp_path / "c.conll"
    p.write_text("EU B-ORG\nrejects\n\n")
    with pytest.raises(ParseError, match=":2"):
        load_conll(p, 0, 1)


def test_load_conll_normalizes_stray_continuation(tmp_path):
    p = tmp_path / "c.conll"
    p.write_text("EU I-ORG\nCommission I-ORG\ntoday O\n\n")
    corpus = load_conll(p, 0, 1)
    assert corpus.sentences[0].labels == ("B-ORG", "I-ORG", "O")
    assert corpus.repaired_labels == 1


def test_write_conll_round_trip(tmp_path):
    corpus = Corpus([Sentence(("EU", "rejects"), None), Sentence(("it",), None)])
    labels = [["B-ORG", "O"], ["O"]]
    out = tmp_path / "out.conll"
    write_conll(corpus, labels, out)
    back = load_conll(out, 0, 1)
    assert [s.tokens for s in back] == [s.tokens for s in corpus]
    assert [list(s.labels) for s in back] == labels


def test_write_conll_empty_corpus(tmp_path):
    out = tmp_path / "out.conll"
    write_conll(Corpus([]), [], out)
    assert out.read_text() == ""
    assert len(load_conll(out, 0, 1)) == 0


def test_write_conll_shape_mismatch_leaves_file_untouched(tmp_path):
    out = tmp_path / "out.conll"
    out.write_text("sentinel\n")
    corpus = Corpus([Sentence(("a", "b"), None)])
    with pytest.raises(ValueError):
        write_conll(corpus, [["O"]], out)
    assert out.read_text() == "sentinel\n"


def test_collect_stats_hand_counts():
    corpus = Corpus([Sentence(("a", "b", "a"), None)])
    stats = collect_stats(corpus)
    assert stats.unigram_counts == {"a": 2, "b": 1}
    assert stats.bigram_counts == {("a", "b"): 1, ("b", "a"): 1}
    assert stats.total_tokens == 3


def test_collect_stats_no_bigrams_across_sentences():
    corpus = Corpus([Sentence(("a",), None), Sentence(("b",), None)])
    stats = collect_stats(corpus)
    assert not stats.bigram_counts


@given(st.lists(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
                min_size=1, max_size=30))
def test_unigram_counts_sum_to_total(token_lists):
    corpus = Corpus([Sentence(tuple(toks), None) for toks in token_lists])
    stats = collect_stats(corpus)
    assert sum(stats.unigram_counts.values()) == stats.total_tokens
    for (a, b), c in stats.bigram_counts.items():
        assert c <= min(stats.unigram_counts[a], stats.unigram_counts[b])


@given(st.lists(st.lists(st.sampled_from("abc"), min_size=1, max_size=5),
                min_size=2, max_size=10),
       st.randoms(use_true_random=False))
def test_collect_stats_permutation_invariant(token_lists, rnd):
    sents = [Sentence(tuple(toks), None) for toks in token_lists]
    shuffled = list(sents)
    rnd.shuffle(shuffled)
    s1, s2 = collect_stats(Corpus(sents)), collect_stats(Corpus(shuffled))
    assert s1.unigram_counts == s2.unigram_counts
    assert s1.bigram_counts == s2.bigram_counts
    assert s1.total_tokens == s2.total_tokens


@settings(max_examples=25)
@given(st.lists(
    st.lists(st.sampled_from(["tok", "x", "Über", "42"]), min_size=1, max_size=6),
    min_size=0, max_size=8))
def test_round_trip_is_identity(tmp_path_factory, token_lists):
    corpus = Corpus([Sentence(tuple(toks), None) for toks in token_lists])
    labels = [["O"] * len(toks) for toks in token_lists]
    out = tmp_path_factory.mktemp("rt") / "c.conll"
    write_conll(corpus, labels, out)
    back = load_conll(out, 0, 1)
    assert [s.tokens for s in back] == [s.tokens for s in corpus]
    assert [list(s.labels) for s in back] == labels


def test_random_corpus_total_is_1000():
    rng = np.random.default_rng(5)
    vocab = [f"w{i}" for i in range(40)]
    sents, used = [], 0
    while used < 1000:
        n = min(int(rng.integers(1, 12)), 1000 - used)
        sents.append(Sentence(tuple(rng.choice(vocab, size=n)), None))
        used += n
    stats = collect_stats(Corpus(sents))
    assert stats.total_tokens == 1000
    assert sum(stats.unigram_counts.values()) == 1000
