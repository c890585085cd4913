"""BM25 passage retrieval over an inverted index.

Scoring uses the Robertson/Zaragoza form with the non-negative IDF variant::

    idf(t)   = ln(1 + (N - df + 0.5) / (df + 0.5))
    score    = sum_t idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))

Each distinct query term counts once.
"""

from __future__ import annotations

import bisect
import heapq
import io
import logging
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field

from .data import Passage

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"DBM25IDX"
INDEX_VERSION = 1
DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

_TOKEN = re.compile(r"\w+")


def analyze(text):
    """Lowercase and split on anything that is not a word character."""
    return _TOKEN.findall(text.lower())


@dataclass
class PassageCorpus:
    passages: list
    by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        if not self.passages:
            raise ValueError("empty passage corpus")
        self.passages = [p if isinstance(p, Passage) else Passage(str(p["passage_id"]), str(p["article_id"]), p["text"])
                         for p in self.passages]
        self.by_id = {}
        for p in self.passages:
            if p.passage_id in self.by_id:
                raise ValueError(f"duplicate passage_id {p.passage_id}")
            self.by_id[p.passage_id] = p

    def __len__(self):
        return len(self.passages)

    def text(self, passage_id):
        return self.by_id[passage_id].text

    @property
    def num_articles(self):
        return len({p.article_id for p in self.passages})


@dataclass
class InvertedIndex:
    passage_ids: list
    doc_lengths: list
    postings: dict
    avgdl: float
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    def __post_init__(self):
        self._row = {pid: i for i, pid in enumerate(self.passage_ids)}

    @property
    def N(self):
        return len(self.passage_ids)

    def df(self, term):
        return len(self.postings.get(term, ()))

    def idf(self, term):
        df = self.df(term)
        return math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))

    def tf(self, term, row):
        plist = self.postings.get(term)
        if not plist:
            return 0
        i = bisect.bisect_left(plist, (row, -1))
        return plist[i][1] if i < len(plist) and plist[i][0] == row else 0

    def term_score(self, term, tf, dl):
        if tf == 0:
            return 0.0
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
        return self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm)

    # -- persistence ------------------------------------------------------

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(INDEX_MAGIC)
        buf.write(struct.pack("<Iddd", INDEX_VERSION, self.avgdl, self.k1, self.b))
        buf.write(struct.pack("<I", self.N))
        for pid, dl in zip(self.passage_ids, self.doc_lengths):
            _write_str(buf, pid)
            buf.write(struct.pack("<I", dl))
        buf.write(struct.pack("<I", len(self.postings)))
        for term in sorted(self.postings):
            plist = self.postings[term]
            _write_str(buf, term)
            buf.write(struct.pack("<I", len(plist)))
            for row, tf in plist:
                buf.write(struct.pack("<II", row, tf))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw):
        buf = io.BytesIO(raw)
        if buf.read(len(INDEX_MAGIC)) != INDEX_MAGIC:
            raise ValueError("not a BM25 index file")
        version, avgdl, k1, b = struct.unpack("<Iddd", _read(buf, 28))
        if version != INDEX_VERSION:
            raise ValueError(f"index format version {version}, expected {INDEX_VERSION}")
        (n,) = struct.unpack("<I", _read(buf, 4))
        pids, lengths = [], []
        for _ in range(n):
            pids.append(_read_str(buf))
            lengths.append(struct.unpack("<I", _read(buf, 4))[0])
        (nterms,) = struct.unpack("<I", _read(buf, 4))
        postings = {}
        for _ in range(nterms):
            term = _read_str(buf)
            (df,) = struct.unpack("<I", _read(buf, 4))
            postings[term] = [struct.unpack("<II", _read(buf, 8)) for _ in range(df)]
        if buf.read(1):
            raise ValueError("trailing bytes after index")
        return cls(pids, lengths, postings, avgdl, k1, b)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _write_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read(buf, n):
    raw = buf.read(n)
    if len(raw) != n:
        raise ValueError("truncated index file")
    return raw


def _read_str(buf):
    (n,) = struct.unpack("<I", _read(buf, 4))
    return _read(buf, n).decode("utf-8")


def build_index(corpus, analyzer=analyze, k1=DEFAULT_K1, b=DEFAULT_B):
    """Inverted index over a :class:`PassageCorpus` (or a list of passages)."""
    if not isinstance(corpus, PassageCorpus):
        corpus = PassageCorpus(list(corpus))
    ordered = sorted(corpus.passages, key=lambda p: p.passage_id)
    lengths, postings = [], {}
    for row, p in enumerate(ordered):
        counts = Counter(analyzer(p.text))
        lengths.append(sum(counts.values()))
        for term in sorted(counts):
            postings.setdefault(term, []).append((row, counts[term]))
    avgdl = sum(lengths) / len(lengths)
    if avgdl <= 0:
        raise ValueError("corpus has no indexable tokens")
    return InvertedIndex([p.passage_id for p in ordered], lengths, postings, avgdl, k1, b)


def query_terms(query_text, analyzer=analyze):
    """Distinct analyzed terms in first-appearance order."""
    return list(dict.fromkeys(analyzer(query_text)))


def bm25_score(terms, passage_id, index):
    row = index._row.get(passage_id)
    if row is None:
        raise KeyError(f"unknown passage_id {passage_id}")
    dl = index.doc_lengths[row]
    score = 0.0
    for term in dict.fromkeys(terms):
        score += index.term_score(term, index.tf(term, row), dl)
    return score


def search(query_text, k, index, analyzer=analyze):
    """Top ``min(k, N)`` ``(passage_id, score)`` pairs, best first, ties by passage_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = query_terms(query_text, analyzer)
    if not terms:
        logger.warning("query %r has no terms after analysis", query_text)
        return []
    scores = [0.0] * index.N
    for term in terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        for row, tf in plist:
            scores[row] += index.term_score(term, tf, index.doc_lengths[row])
    top = heapq.nsmallest(k, range(index.N), key=lambda r: (-scores[r], index.passage_ids[r]))
    return [(index.passage_ids[r], scores[r]) for r in top]
