"""Small seeded corpora for desk-scale runs and tests.

Words are Vietnamese-flavoured and already word-segmented (syllables of a
compound joined by ``_``), matching the corpus format the tokenizer expects.
"""

from __future__ import annotations

from .rng import make_rng

SUBJECTS = ["học_sinh", "giáo_viên", "bác_sĩ", "nông_dân", "kỹ_sư", "ca_sĩ", "nhà_văn", "cảnh_sát"]
VERBS = ["đọc", "viết", "mua", "bán", "thấy", "mang", "sửa", "vẽ"]
OBJECTS = ["sách", "báo", "xe_đạp", "bức_tranh", "lá_thư", "máy_tính", "chiếc_áo", "bài_hát"]
PLACES = ["Hà_Nội", "Huế", "Đà_Nẵng", "Cần_Thơ", "Hải_Phòng", "Nha_Trang", "Vũng_Tàu", "Sài_Gòn"]
TIMES = ["hôm_nay", "hôm_qua", "sáng_nay", "tối_qua"]

# word -> POS tag for the toy tagging set
POS_TAGS = {
    **{w: "N" for w in SUBJECTS + OBJECTS},
    **{w: "V" for w in VERBS},
    **{w: "Np" for w in PLACES},
    **{w: "T" for w in TIMES},
    "ở": "E",
    ".": "CH",
}


def sentence(rng):
    s = SUBJECTS[rng.integers(len(SUBJECTS))]
    v = VERBS[rng.integers(len(VERBS))]
    o = OBJECTS[rng.integers(len(OBJECTS))]
    p = PLACES[rng.integers(len(PLACES))]
    t = TIMES[rng.integers(len(TIMES))]
    return [s, v, o, "ở", p, t, "."]


def pretraining_corpus(n=50, seed=0):
    """``n`` sentences, one string each."""
    rng = make_rng(seed, "synthetic", "corpus")
    return [" ".join(sentence(rng)) for _ in range(n)]


def pos_dataset(n=8, seed=0):
    """``n`` (words, tags) pairs for POS tagging."""
    rng = make_rng(seed, "synthetic", "pos")
    out = []
    for _ in range(n):
        words = sentence(rng)
        out.append((words, [POS_TAGS[w] for w in words]))
    return out


def ner_dataset(n=8, seed=0):
    """``n`` (words, BIO tags) pairs; places are LOC, subjects PER (split into two words)."""
    rng = make_rng(seed, "synthetic", "ner")
    out = []
    for _ in range(n):
        words = sentence(rng)
        toks, tags = [], []
        for w in words:
            if w in PLACES:
                parts = w.split("_")
                toks.extend(parts)
                tags.extend(["B-LOC"] + ["I-LOC"] * (len(parts) - 1))
            elif w in SUBJECTS:
                toks.append(w)
                tags.append("B-PER")
            else:
                toks.append(w)
                tags.append("O")
        out.append((toks, tags))
    return out


def qa_corpus(num_passages=20, questions_per_passage=1, seed=0, sentences_per_passage=3):
    """Passages with unique marker phrases and questions quoting them.

    Returns ``(passages, questions)`` as lists of dicts in the JSON-lines
    layouts (``passage_id``/``article_id``/``text`` and
    ``id``/``question``/``passage_id``/``passage``/``answer``/``answer_start``).
    Every passage contains a unique code word ``mãXXXX`` next to its answer,
    and every question quotes that code word, so lexical retrieval can find
    the gold passage.
    """
    rng = make_rng(seed, "synthetic", "qa")
    passages, questions = [], []
    for p in range(num_passages):
        code = f"mã{p:04d}"
        subj = SUBJECTS[rng.integers(len(SUBJECTS))]
        place = PLACES[rng.integers(len(PLACES))]
        obj = OBJECTS[rng.integers(len(OBJECTS))]
        filler = [" ".join(sentence(rng)) for _ in range(sentences_per_passage - 1)]
        key_sentence = f"{subj} {code} sống ở {place} và có {obj} ."
        text = " ".join(filler[: len(filler) // 2] + [key_sentence] + filler[len(filler) // 2:])
        pid = f"p{p:04d}"
        passages.append({"passage_id": pid, "article_id": f"a{p // 5:03d}", "text": text})
        qa = [(f"{subj} {code} sống ở đâu ?", place), (f"{subj} {code} có gì ?", obj)]
        for q in range(questions_per_passage):
            question, answer = qa[q % len(qa)]
            start = text.index(f"{code} sống ở {place}") if answer == place else text.index(f"có {obj} .")
            start = text.index(answer, start)
            questions.append({
                "id": f"q{p:04d}_{q}",
                "question": question,
                "passage_id": pid,
                "passage": text,
                "answer": answer,
                "answer_start": start,
            })
    return passages, questions
