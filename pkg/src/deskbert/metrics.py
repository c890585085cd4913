"""Evaluation metrics: tagging accuracy, entity-level F1 and answer-span token F1."""

from __future__ import annotations

import re
import unicodedata
from collections import Counter


def token_accuracy(predictions, golds):
    """Fraction of positions where prediction equals gold.

    Accepts either two flat label sequences or two lists of sentences.
    """
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")
    if predictions and isinstance(predictions[0], (list, tuple)):
        pairs = []
        for p, g in zip(predictions, golds):
            if len(p) != len(g):
                raise ValueError("sentence lengths differ")
            pairs.extend(zip(p, g))
    else:
        pairs = list(zip(predictions, golds))
    if not pairs:
        raise ValueError("no positions to score")
    return sum(p == g for p, g in pairs) / len(pairs)


def bio_chunks(tags):
    """Decode one BIO sequence into ``(type, start, end)`` chunks, ``end`` exclusive.

    Returns ``(chunks, repaired)``; an ``I-X`` that does not continue an
    open ``X`` chunk is read as ``B-X`` and counted in ``repaired``.
    """
    chunks, repaired = [], 0
    cur_type, cur_start = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, typ = tag.partition("-")
        if prefix == "I" and cur_type != typ:
            repaired += 1
            prefix = "B"
        if prefix in ("B", "O"):
            if cur_type is not None:
                chunks.append((cur_type, cur_start, i))
            cur_type, cur_start = (typ, i) if prefix == "B" else (None, None)
        elif prefix != "I":
            raise ValueError(f"not a BIO tag: {tag!r}")
    return chunks, repaired


def entity_f1(predictions, golds):
    """Micro-averaged exact-chunk precision, recall and F1 over sentences of BIO tags."""
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in number of sentences")
    if predictions and isinstance(predictions[0], str):
        predictions, golds = [predictions], [golds]
    pred_set, gold_set, repaired = set(), set(), 0
    for s, (p, g) in enumerate(zip(predictions, golds)):
        if len(p) != len(g):
            raise ValueError(f"sentence {s}: {len(p)} predicted tags vs {len(g)} gold tags")
        pc, rp = bio_chunks(p)
        gc, rg = bio_chunks(g)
        repaired += rp + rg
        pred_set.update((s, *c) for c in pc)
        gold_set.update((s, *c) for c in gc)
    if not pred_set and not gold_set:
        return {"precision": 1.0, "recall": 1.0, "f1": 1.0, "repaired": repaired}
    tp = len(pred_set & gold_set)
    precision = tp / len(pred_set) if pred_set else 0.0
    recall = tp / len(gold_set) if gold_set else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "repaired": repaired}


def normalize_answer(text):
    """Lowercase, drop punctuation and collapse whitespace; no article stripping."""
    text = text.lower()
    text = "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))
    return re.sub(r"\s+", " ", text).strip()


def _f1(pred, gold):
    p, g = normalize_answer(pred).split(), normalize_answer(gold).split()
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision = common / len(p)
    recall = common / len(g)
    return 2 * precision * recall / (precision + recall)


def squad_token_f1(pred_text, gold_texts):
    """Best token-overlap F1 of ``pred_text`` against one or more gold answers."""
    if isinstance(gold_texts, str):
        gold_texts = [gold_texts]
    return max(_f1(pred_text, g) for g in gold_texts)


def exact_match(pred_text, gold_texts):
    if isinstance(gold_texts, str):
        gold_texts = [gold_texts]
    return float(any(normalize_answer(pred_text) == normalize_answer(g) for g in gold_texts))
