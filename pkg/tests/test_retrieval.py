import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bm25_oracle import brute_force_rank
from deskbert import synthetic
from deskbert.data import Passage
from deskbert.retrieval import InvertedIndex, PassageCorpus, bm25_score, build_index, search


@pytest.fixture(scope="module")
def corpus():
    passages, _ = synthetic.qa_corpus(200, 1, seed=5)
    return PassageCorpus(passages)


@pytest.fixture(scope="module")
def index(corpus):
    return build_index(corpus)


def test_single_passage_hand_value():
    idx = build_index([Passage("p", "a", "a b a")])
    expected = math.log(1 + 0.5 / 1.5) * 2 * 2.2 / (2 + 1.2)
    assert abs(bm25_score(["a"], "p", idx) - expected) < 1e-9
    assert search("a", 1, idx) == [("p", bm25_score(["a"], "p", idx))]


def test_query_terms_counted_once():
    idx = build_index([Passage("p", "a", "a b a"), Passage("q", "a", "c")])
    assert bm25_score(["a", "a"], "p", idx) == bm25_score(["a"], "p", idx)


def test_rare_terms_score_higher():
    idx = build_index([Passage("1", "a", "x y"), Passage("2", "a", "x z"), Passage("3", "a", "x w")])
    assert bm25_score(["y"], "1", idx) > bm25_score(["x"], "1", idx)


def test_empty_query_warns_and_returns_nothing(index, caplog):
    assert search("?? !!", 5, index) == []
    assert "no terms" in caplog.text


def test_k_equal_n_is_a_permutation(index, corpus):
    ids = [pid for pid, _ in search("lan ở huế", len(corpus), index)]
    assert sorted(ids) == sorted(p.passage_id for p in corpus.passages)


def test_ties_break_by_passage_id():
    idx = build_index([Passage("b", "a", "x"), Passage("a", "a", "x"), Passage("c", "a", "y")])
    assert [p for p, _ in search("x", 3, idx)] == ["a", "b", "c"]


def test_errors():
    with pytest.raises(ValueError):
        build_index([])
    with pytest.raises(ValueError):
        build_index([Passage("a", "x", "t"), Passage("a", "x", "u")])
    idx = build_index([Passage("a", "x", "t")])
    with pytest.raises(KeyError):
        bm25_score(["t"], "zz", idx)


def test_matches_brute_force_on_random_queries(index, corpus):
    rng = np.random.default_rng(0)
    vocab = sorted(index.postings)
    for _ in range(100):
        words = [vocab[i] for i in rng.integers(0, len(vocab), size=int(rng.integers(1, 6)))]
        query = " ".join(words)
        k = int(rng.integers(1, 25))
        assert search(query, k, index) == brute_force_rank(query, corpus.passages, k)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["lan", "huế", "mã0003", "sách", "ở", "zzz", "minh"]), min_size=1, max_size=5))
def test_brute_force_property(index, corpus, words):
    query = " ".join(words)
    assert search(query, 10, index) == brute_force_rank(query, corpus.passages, 10)


def test_serialization_is_lossless(tmp_path, index):
    raw = index.to_bytes()
    again = InvertedIndex.from_bytes(raw)
    assert again.to_bytes() == raw
    assert again.passage_ids == index.passage_ids and again.postings == index.postings
    assert again.avgdl == index.avgdl
    index.save(tmp_path / "i.bin")
    assert InvertedIndex.load(tmp_path / "i.bin").to_bytes() == raw


def test_corrupt_index_file_rejected(index):
    raw = index.to_bytes()
    with pytest.raises(ValueError):
        InvertedIndex.from_bytes(b"NOTINDEX" + raw[8:])
    with pytest.raises(ValueError):
        InvertedIndex.from_bytes(raw[:-3])
