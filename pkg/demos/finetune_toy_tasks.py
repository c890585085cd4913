"""
Fine-tuning heads: POS, NER and extractive QA
=============================================

A randomly initialised tiny backbone is enough to overfit the toy sets, which
is all this demo shows. Real numbers need a pre-trained backbone.
"""

from deskbert import finetune as F
from deskbert import model as M
from deskbert import synthetic
from deskbert import tokenizer as tok
from deskbert.data import QAExample
from deskbert.metrics import entity_f1

texts = synthetic.pretraining_corpus(200, seed=0)
passages, questions = synthetic.qa_corpus(16, 1, seed=0)
vocab = tok.train_bpe(texts + [p["text"] for p in passages] + [q["question"] for q in questions], 1000)

cfg = M.preset("tiny", vocab_size=len(vocab), max_seq_len=128, relative_distance=16, hidden_size=32)
backbone = M.init_params(cfg, seed=0, with_mlm_head=False)
ft = F.FinetuneConfig(lr=3e-3, epochs=200, seed=0)

pos = synthetic.pos_dataset(8, seed=0)
tagger = F.finetune_token_classification(backbone, cfg, vocab, pos, sorted({t for _, ts in pos for t in ts}), ft)
acc, _ = F.evaluate_tagging(tagger, pos)
print("POS train accuracy:", acc)

ner = synthetic.ner_dataset(8, seed=0)
labels = sorted({t for _, ts in ner for t in ts})
ner_model = F.finetune_token_classification(backbone, cfg, vocab, ner, labels, ft)
preds = ner_model.predict([w for w, _ in ner])
print("NER entity F1:", entity_f1(preds, [t for _, t in ner])["f1"])
print(list(zip(ner[0][0], preds[0])))

examples = [QAExample(q["id"], q["question"], q["passage"], q["answer"], q["answer_start"], q["passage_id"])
            for q in questions]
reader, stats = F.finetune_mrc(backbone, cfg, vocab, examples, ft.replace(epochs=100))
print("MRC", F.evaluate_mrc(reader, examples), stats)
ex = examples[3]
print(ex.question, "->", reader.read(ex.question, ex.passage).text, f"(gold {ex.answer})")
