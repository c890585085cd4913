"""Retriever-reader open-domain QA: BM25 picks passages, a span reader answers from them."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

from .data import DataError, Passage, QAExample, read_passages, read_qa
from .finetune import SpanPrediction
from .metrics import squad_token_f1
from .retrieval import PassageCorpus, search

logger = logging.getLogger(__name__)

DEFAULT_GRID = (1, 5, 10, 20)

# articles, passages, questions
VIQUAD_COUNTS = {"train": (138, 4101, 18579), "dev": (18, 515, 2285)}
VIQUAD_TEST_MIN_QUESTIONS = 2000


@dataclass
class PipelineAnswer:
    text: str
    passage_id: str | None
    reader_score: float
    rank: int | None
    retriever_score: float
    empty_retrieval: bool = False
    retrieved: list = field(default_factory=list)


class OracleReader:
    """Returns the gold answer (score 1) on the gold passage and nothing (score 0) elsewhere."""

    def __init__(self, examples):
        self._gold = {}
        seen = {}
        for ex in examples:
            if seen.setdefault(ex.question, ex.passage) != ex.passage:
                raise ValueError(f"question {ex.question!r} has more than one gold passage; the oracle needs unique questions")
            self._gold[(ex.question, ex.passage)] = ex.answer

    def read(self, question, passage):
        gold = self._gold.get((question, passage))
        if gold is None:
            return SpanPrediction(0, 0, "", 0.0)
        return SpanPrediction(0, 0, gold, 1.0)


def _select(question, hits, corpus, reader, mu, cache=None):
    best = None
    for rank, (pid, rscore) in enumerate(hits, 1):
        key = (question, pid)
        if cache is not None and key in cache:
            span = cache[key]
        else:
            span = reader.read(question, corpus.text(pid))
            if cache is not None:
                cache[key] = span
        combined = span.score + mu * rscore
        # strict > keeps the lower rank on ties
        if best is None or combined > best[0]:
            best = (combined, span, pid, rank, rscore)
    _, span, pid, rank, rscore = best
    return PipelineAnswer(span.text, pid, span.score, rank, rscore, retrieved=[h[0] for h in hits])


def answer(question, k, index, reader, corpus, mu=0.0):
    """Best span over the top-``k`` retrieved passages.

    Passages are ranked by ``reader score + mu * retriever score``; with the
    default ``mu = 0`` only the reader decides.
    """
    hits = search(question, k, index)
    if not hits:
        return PipelineAnswer("", None, 0.0, None, 0.0, empty_retrieval=True)
    return _select(question, hits, corpus, reader, mu)


@dataclass
class OdqaReport:
    grid: tuple
    f1: dict
    recall: dict
    n: int
    unanswered: dict

    def to_json(self):
        return {str(k): {"f1": self.f1[k], "recall": self.recall[k], "n": self.n} for k in self.grid}

    def table(self):
        lines = [f"{'k':>4}  {'F1':>8}  {'recall':>8}  {'n':>6}  {'unanswered':>10}"]
        for k in self.grid:
            lines.append(f"{k:>4}  {100 * self.f1[k]:8.2f}  {100 * self.recall[k]:8.2f}  {self.n:>6}  {self.unanswered[k]:>10}")
        return "\n".join(lines)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=False)
            fh.write("\n")


def evaluate_odqa(dataset, grid, index, reader, corpus, mu=0.0, per_question=None):
    """Mean token F1 of pipeline answers and retriever recall for each ``k`` in ``grid``.

    Retrieval runs once per question at ``max(grid)``; smaller ``k`` use a
    prefix of that ranking, which is exactly what :func:`search` would
    return for them. If ``per_question`` is a dict it receives
    ``{k: [f1, ...]}``.
    """
    grid = tuple(grid) if grid else DEFAULT_GRID
    if any(k < 1 for k in grid):
        raise ValueError("grid values must be >= 1")
    if not dataset:
        raise ValueError("empty evaluation set")
    kmax = max(grid)
    scores = {k: [] for k in grid}
    hits_at = {k: 0 for k in grid}
    unanswered = {k: 0 for k in grid}
    for ex in dataset:
        if ex.passage_id not in corpus.by_id:
            raise DataError(f"question {ex.id} references unknown passage {ex.passage_id}")
        ranking = search(ex.question, kmax, index)
        cache = {}
        for k in grid:
            hits = ranking[:k]
            if not hits:
                unanswered[k] += 1
                scores[k].append(0.0)
                continue
            ans = _select(ex.question, hits, corpus, reader, mu, cache)
            scores[k].append(squad_token_f1(ans.text, ex.answers))
            hits_at[k] += ex.passage_id in ans.retrieved
    if per_question is not None:
        per_question.update(scores)
    n = len(dataset)
    return OdqaReport(
        grid=grid,
        f1={k: sum(scores[k]) / n for k in grid},
        recall={k: hits_at[k] / n for k in grid},
        n=n,
        unanswered=unanswered,
    )


# -- ViQuAD-style loading -------------------------------------------------------


@dataclass
class QADataset:
    corpus: PassageCorpus
    examples: list
    dropped: int

    @property
    def counts(self):
        """Split sizes; ``questions`` counts every row read, including dropped ones."""
        return {
            "articles": self.corpus.num_articles,
            "passages": len(self.corpus),
            "questions": len(self.examples) + self.dropped,
            "usable_questions": len(self.examples),
        }


def companion_passages_path(path):
    stem = path[:-len(".jsonl")] if path.endswith(".jsonl") else path
    return stem + ".passages.jsonl"


def _load_squad_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("data"), list):
        raise DataError(f"{path}: expected a SQuAD-style object with a 'data' list")
    passages, examples, dropped = [], [], 0
    for a, article in enumerate(doc["data"]):
        aid = str(article.get("title", a))
        for p, para in enumerate(article.get("paragraphs", [])):
            pid = f"{a}_{p}"
            text = para["context"]
            passages.append(Passage(pid, aid, text))
            for qa in para.get("qas", []):
                answers = qa.get("answers") or []
                if not answers:
                    dropped += 1
                    continue
                first = answers[0]
                ex = QAExample(str(qa["id"]), qa["question"], text, first["text"], int(first["answer_start"]), pid,
                               [x["text"] for x in answers[1:] if x["text"] != first["text"]])
                if not ex.offset_ok():
                    dropped += 1
                    continue
                examples.append(ex)
    return passages, examples, dropped


def load_viquad(path):
    """Passages and questions from a QA split.

    Accepts either the JSON-lines question file (with its passages in
    ``<stem>.passages.jsonl`` next to it) or a SQuAD-style ``.json`` file.
    """
    if not os.path.exists(path):
        raise DataError(f"{path}: no such file")
    if os.path.getsize(path) == 0:
        raise DataError(f"{path}: empty file")
    if path.endswith(".json"):
        passages, examples, dropped = _load_squad_json(path)
    else:
        ppath = companion_passages_path(path)
        if not os.path.exists(ppath):
            raise DataError(f"{path}: companion passages file {ppath} not found")
        passages = read_passages(ppath)
        examples, dropped = read_qa(path)
        known = {p.passage_id for p in passages}
        for ex in examples:
            if ex.passage_id not in known:
                raise DataError(f"{path}: question {ex.id} references unknown passage {ex.passage_id}")
    if not passages or not (examples or dropped):
        raise DataError(f"{path}: no passages or questions")
    if dropped:
        logger.warning("%s: dropped %d question(s) with mismatched answer offsets", path, dropped)
    return QADataset(PassageCorpus(passages), examples, dropped)


def check_viquad_counts(split, counts):
    """Problems with ``counts`` against the published split sizes; empty when they agree."""
    got = (counts["articles"], counts["passages"], counts["questions"])
    if split in VIQUAD_COUNTS:
        want = VIQUAD_COUNTS[split]
        if got != want:
            return [f"{split}: expected articles/passages/questions {want}, got {got}"]
        return []
    if split == "test":
        # the published test question count is garbled, so only a floor is checked
        logger.info("test split: only checking questions > %d", VIQUAD_TEST_MIN_QUESTIONS)
        if counts["questions"] <= VIQUAD_TEST_MIN_QUESTIONS:
            return [f"test: expected more than {VIQUAD_TEST_MIN_QUESTIONS} questions, got {counts['questions']}"]
        return []
    raise ValueError(f"unknown split {split!r}")
