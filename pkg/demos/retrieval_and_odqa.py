"""
BM25 retrieval and the retriever-reader pipeline
================================================

Index 200 synthetic passages, query them, and measure F1@k and recall@k with
an oracle reader. With that reader the two curves coincide, so any gap seen
with a trained reader is the reader's fault.
"""

import os
import tempfile

from deskbert import odqa, synthetic
from deskbert.data import QAExample
from deskbert.retrieval import InvertedIndex, PassageCorpus, build_index, search

passages, questions = synthetic.qa_corpus(200, 1, seed=9)
corpus = PassageCorpus(passages)
index = build_index(corpus)
print(f"{index.N} passages, {len(index.postings)} terms, avgdl {index.avgdl:.1f}")

q = questions[42]
print(q["question"])
for pid, score in search(q["question"], 3, index):
    print(f"  {pid}  {score:6.3f}  {corpus.text(pid)[:60]}...")

with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "index.bin")
    index.save(path)
    print("index bytes:", os.path.getsize(path), "reload identical:",
          InvertedIndex.load(path).to_bytes() == index.to_bytes())

examples = [QAExample(r["id"], r["question"], r["passage"], r["answer"], r["answer_start"], r["passage_id"])
            for r in questions]
report = odqa.evaluate_odqa(examples, odqa.DEFAULT_GRID, index, odqa.OracleReader(examples), corpus)
print(report.table())

# drop the code word from each question and retrieval gets much harder
vague = [QAExample(e.id, e.question.split(" ", 2)[-1] + " " + e.id, e.passage, e.answer, e.answer_start,
                   e.passage_id) for e in examples]
print(odqa.evaluate_odqa(vague, odqa.DEFAULT_GRID, index, odqa.OracleReader(vague), corpus).table())
