import os

import numpy as np
import pytest

from deskbert import model as M
from deskbert import synthetic
from deskbert import tokenizer as tok
from deskbert.data import QAExample

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(name):
    return os.path.join(FIXTURES, name)


def qa_examples(rows):
    return [QAExample(r["id"], r["question"], r["passage"], r["answer"], r["answer_start"], r["passage_id"])
            for r in rows]


@pytest.fixture(scope="session")
def tiny64():
    """Dropout-free float64 tiny encoder config, for gradient checks."""
    return M.preset("tiny", dtype="float64")


@pytest.fixture(scope="session")
def toy_vocab():
    texts = synthetic.pretraining_corpus(200, seed=0)
    passages, questions = synthetic.qa_corpus(16, 1, seed=0)
    texts += [p["text"] for p in passages] + [q["question"] for q in questions]
    return tok.train_bpe(texts, vocab_size=1000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
