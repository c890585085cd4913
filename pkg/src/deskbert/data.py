"""Readers and writers for the on-disk data formats.

* CoNLL-style tagging files: ``word<TAB>label`` per line, blank line between
  sentences.
* QA JSON-lines: one question per line with ``id``, ``question``,
  ``passage_id``, ``passage``, ``answer``, ``answer_start``.
* Passage JSON-lines: ``passage_id``, ``article_id``, ``text``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed input data; the message names the file and line."""


@dataclass
class QAExample:
    id: str
    question: str
    passage: str
    answer: str
    answer_start: int
    passage_id: str | None = None
    alt_answers: list = field(default_factory=list)

    @property
    def answers(self):
        return [self.answer, *self.alt_answers]

    def offset_ok(self):
        return self.passage[self.answer_start:self.answer_start + len(self.answer)] == self.answer


@dataclass
class Passage:
    passage_id: str
    article_id: str
    text: str


def read_conll(path):
    """List of ``(words, labels)`` sentences."""
    sentences, words, labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                if words:
                    sentences.append((words, labels))
                    words, labels = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected 'word<TAB>label', got {line!r}")
            words.append(parts[0])
            labels.append(parts[1])
    if words:
        sentences.append((words, labels))
    return sentences


def write_conll(path, sentences):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for words, labels in sentences:
            for w, t in zip(words, labels):
                fh.write(f"{w}\t{t}\n")
            fh.write("\n")


def read_jsonl(path):
    """Yield ``(lineno, obj)``; malformed lines raise :class:`DataError` with the line number."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


_QA_FIELDS = ("id", "question", "passage_id", "passage", "answer", "answer_start")
_PASSAGE_FIELDS = ("passage_id", "article_id", "text")


def _require(obj, fields, path, lineno):
    missing = [f for f in fields if f not in obj]
    if missing:
        raise DataError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")


def read_qa(path):
    """QA examples plus the number dropped for answer-offset mismatches."""
    examples, dropped = [], 0
    for lineno, obj in read_jsonl(path):
        _require(obj, _QA_FIELDS, path, lineno)
        if not isinstance(obj["answer_start"], int):
            raise DataError(f"{path}:{lineno}: answer_start must be an integer")
        ex = QAExample(
            id=str(obj["id"]), question=obj["question"], passage=obj["passage"], answer=obj["answer"],
            answer_start=obj["answer_start"], passage_id=str(obj["passage_id"]),
            alt_answers=list(obj.get("alt_answers", [])),
        )
        if not ex.offset_ok():
            logger.warning("%s:%d: answer does not match passage at answer_start; dropped", path, lineno)
            dropped += 1
            continue
        examples.append(ex)
    return examples, dropped


def read_passages(path):
    passages, seen = [], set()
    for lineno, obj in read_jsonl(path):
        _require(obj, _PASSAGE_FIELDS, path, lineno)
        pid = str(obj["passage_id"])
        if pid in seen:
            raise DataError(f"{path}:{lineno}: duplicate passage_id {pid}")
        seen.add(pid)
        passages.append(Passage(pid, str(obj["article_id"]), obj["text"]))
    return passages


def qa_to_row(ex):
    row = {"id": ex.id, "question": ex.question, "passage_id": ex.passage_id, "passage": ex.passage,
           "answer": ex.answer, "answer_start": ex.answer_start}
    if ex.alt_answers:
        row["alt_answers"] = ex.alt_answers
    return row
