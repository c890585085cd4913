"""
Training a BPE vocabulary
=========================

Learn merges from a small synthetic Vietnamese corpus, look at the pieces it
produces, and save the vocabulary file.
"""

import os
import tempfile

from deskbert import synthetic
from deskbert import tokenizer as tok

corpus = synthetic.pretraining_corpus(200, seed=0)
print(corpus[0])

vocab = tok.train_bpe(corpus, vocab_size=400)
# merging stops once no pair occurs twice, so the vocabulary can come out smaller
print("vocabulary size:", len(vocab), "merges:", len(vocab.merges))

seq = tok.encode(corpus[0], vocab, pad_to=24)
print("ids:", seq.ids)
print("pieces:", [vocab.tokens[i] for i in seq.ids if i != tok.PAD])
print("decoded:", tok.decode(seq.ids, vocab))

# unseen words fall back to known pieces; "Q" was never seen, becomes [UNK] and is dropped on decode,
# so the leftover continuation piece glues onto the previous word
print(tok.decode(tok.encode("bác_sĩ viết sách ở Quy_Nhơn !", vocab).ids, vocab))

with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "vocab.txt")
    vocab.save(path)
    print("round trip ok:", tok.Vocabulary.load(path).to_text() == vocab.to_text())
