"""Fine-tuning heads for word tagging and extractive reading comprehension."""

from __future__ import annotations

import dataclasses
import logging
import os
import statistics
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .metrics import exact_match, squad_token_f1, token_accuracy
from .optim import AdamWState, adamw_step, clip_grad_norm
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .rng import make_rng
from .tokenizer import CLS, PAD, SEP, UNK, Vocabulary, split_units

logger = logging.getLogger(__name__)

DEFAULT_MAX_ANSWER_TOKENS = 50


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-5
    batch_size: int = 16
    epochs: int = 3
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    seed: int = 0
    max_seq_len: int = 512
    max_question_tokens: int = 64
    max_answer_tokens: int = DEFAULT_MAX_ANSWER_TOKENS
    dropout: float = 0.1

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


TAGGING_DEFAULTS = FinetuneConfig(lr=1e-5)
MRC_DEFAULTS = FinetuneConfig(lr=2e-5)


def _copy_params(params):
    return {name: T.Tensor(p.data.copy(), requires_grad=True, name=name) for name, p in params.items()}


def _head(cfg, out_dim, seed, label):
    rng = make_rng(seed, "init", label)
    dt = cfg.np_dtype
    w = (rng.standard_normal((cfg.hidden_size, out_dim)) * cfg.init_std).astype(dt)
    return T.Tensor(w, requires_grad=True), T.Tensor(np.zeros((out_dim,), dtype=dt), requires_grad=True)


def _pad_rows(rows, fill):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _train_loop(params, loss_fn, n, ft, label):
    """Mini-batch AdamW at a constant learning rate over ``n`` examples."""
    opt = AdamWState(lr=ft.lr, weight_decay=ft.weight_decay)
    step = 0
    for epoch in range(ft.epochs):
        order = make_rng(ft.seed, label, "shuffle", epoch).permutation(n)
        for start in range(0, n, ft.batch_size):
            rows = order[start:start + ft.batch_size]
            loss = loss_fn(rows, make_rng(ft.seed, label, "dropout", step))
            if not np.isfinite(loss.item()):
                raise T.NonFiniteError(f"non-finite fine-tuning loss at step {step}")
            grads, _ = clip_grad_norm(T.grads_for(params, T.backward(loss)), ft.clip_norm)
            adamw_step(params, grads, opt)
            step += 1
    return opt


# ---------------------------------------------------------------------------
# word tagging


def encode_words(words, vocab, max_seq_len):
    """Subword ids for a word list plus the index of each word's first piece.

    Words that do not fit are marked with first-piece index -1.
    """
    ids, first = [CLS], []
    for w in words:
        pieces = []
        for piece, _, _, initial in split_units(vocab.normalize(w)):
            pieces.extend(vocab.unit_to_ids(piece, initial))
        pieces = pieces or [UNK]
        if len(ids) + len(pieces) > max_seq_len - 1:
            first.append(-1)
            continue
        first.append(len(ids))
        ids.extend(pieces)
    ids.append(SEP)
    return ids, first


@dataclass
class TokenClassifier:
    cfg: M.ModelConfig
    params: dict
    labels: list
    vocab: object
    max_seq_len: int = 512

    @property
    def num_labels(self):
        return len(self.labels)

    def logits(self, ids, mask, rng=None, training=False):
        h = M.encode(self.params, ids, mask, self.cfg, rng=rng, training=training)
        return T.linear(h, self.params["head.w"], self.params["head.b"])

    def predict(self, sentences):
        """Label strings for each word of each sentence in ``sentences``."""
        out = []
        for words in sentences:
            ids, first = encode_words(words, self.vocab, self.max_seq_len)
            arr = np.asarray([ids])
            scores = self.logits(arr, np.ones_like(arr)).data[0]
            out.append([self.labels[int(scores[f].argmax())] if f >= 0 else self.labels[0] for f in first])
        return out


def finetune_token_classification(backbone, cfg, vocab, dataset, labels, ft=TAGGING_DEFAULTS):
    """Train a linear tagging head (and the backbone) on ``(words, tags)`` pairs.

    Only the first subword of each word carries a label in the loss.
    ``backbone`` is copied, never modified.
    """
    if not dataset:
        raise ValueError("empty dataset")
    labels = list(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    cfg = cfg.replace(dropout=ft.dropout)
    max_len = min(ft.max_seq_len, cfg.max_seq_len)
    encoded = []
    for words, tags in dataset:
        if len(words) != len(tags):
            raise ValueError("words and tags differ in length")
        tag_ids = []
        for t in tags:
            tid = index.get(t, t) if not isinstance(t, (int, np.integer)) else int(t)
            if not isinstance(tid, (int, np.integer)) or not 0 <= tid < len(labels):
                raise ValueError(f"label {t!r} is not one of the {len(labels)} labels")
            tag_ids.append(int(tid))
        ids, first = encode_words(words, vocab, max_len)
        target = [-100] * len(ids)
        for f, tid in zip(first, tag_ids):
            if f >= 0:
                target[f] = tid
        encoded.append((ids, target))

    params = _copy_params(backbone)
    params["head.w"], params["head.b"] = _head(cfg, len(labels), ft.seed, "tagging_head")
    model = TokenClassifier(cfg, params, labels, vocab, max_len)

    def loss_fn(rows, rng):
        ids = _pad_rows([encoded[r][0] for r in rows], PAD)
        target = _pad_rows([encoded[r][1] for r in rows], -100)
        mask = (np.arange(ids.shape[1])[None, :] < np.array([len(encoded[r][0]) for r in rows])[:, None])
        logits = model.logits(ids, mask.astype(np.int64), rng=rng, training=True)
        return T.cross_entropy(logits, target)

    _train_loop(params, loss_fn, len(encoded), ft, "tagging")
    return model


def evaluate_tagging(model, dataset):
    preds = model.predict([w for w, _ in dataset])
    return token_accuracy(preds, [list(t) for _, t in dataset]), preds


def seed_sweep(run, seeds=(0, 1, 2, 3, 4)):
    """Run ``run(seed) -> score`` per seed and summarize as mean and sample stdev."""
    values = [float(run(s)) for s in seeds]
    stdev = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": statistics.fmean(values), "stdev": stdev, "values": values}


# ---------------------------------------------------------------------------
# span extraction


@dataclass
class SpanPrediction:
    start: int
    end: int
    text: str
    score: float


def decode_best_span(start_logits, end_logits, max_answer_tokens=DEFAULT_MAX_ANSWER_TOKENS):
    """Highest ``start[s] + end[e]`` with ``s <= e < s + max_answer_tokens``.

    Ties go to the smaller start, then the smaller end.
    """
    start_logits = np.asarray(start_logits, dtype=np.float64)
    end_logits = np.asarray(end_logits, dtype=np.float64)
    n = start_logits.shape[0]
    if n == 0 or end_logits.shape[0] != n:
        raise ValueError("need equal-length, non-empty start and end logits")
    s = np.arange(n)[:, None]
    e = np.arange(n)[None, :]
    valid = (e >= s) & (e < s + max_answer_tokens)
    scores = np.where(valid, start_logits[:, None] + end_logits[None, :], -np.inf)
    flat = int(np.argmax(scores))
    bs, be = divmod(flat, n)
    return SpanPrediction(bs, be, "", float(scores[bs, be]))


@dataclass
class QAFeature:
    ids: list
    passage_start: int
    passage_len: int
    piece_unit: list
    units: list
    start_token: int | None = None
    end_token: int | None = None


def encode_qa(question, passage, vocab, max_seq_len=512, max_question_tokens=64):
    """``[CLS] question [SEP] passage [SEP]`` with passage piece -> character-span bookkeeping."""
    q_ids, _ = vocab.tokenize_units(question)
    q_ids = q_ids[:max_question_tokens]
    units = split_units(vocab.normalize(passage))
    budget = max_seq_len - len(q_ids) - 3
    p_ids, piece_unit = [], []
    for u, (piece, _, _, initial) in enumerate(units):
        for t in vocab.unit_to_ids(piece, initial):
            p_ids.append(t)
            piece_unit.append(u)
    p_ids, piece_unit = p_ids[:budget], piece_unit[:budget]
    ids = [CLS] + q_ids + [SEP] + p_ids + [SEP]
    spans = [(s, e) for _, s, e, _ in units]
    return QAFeature(ids, len(q_ids) + 2, len(p_ids), piece_unit, spans)


def locate_answer(feature, answer_start, answer_len):
    """Passage-relative (start, end) piece indices of a character span, or a reason string."""
    answer_end = answer_start + answer_len
    start_unit = next((u for u, (s, _) in enumerate(feature.units) if s == answer_start), None)
    end_unit = next((u for u, (_, e) in enumerate(feature.units) if e == answer_end), None)
    if start_unit is None or end_unit is None or end_unit < start_unit:
        return "unaligned"
    starts = [i for i, u in enumerate(feature.piece_unit) if u == start_unit]
    ends = [i for i, u in enumerate(feature.piece_unit) if u == end_unit]
    if not starts or not ends:
        return "truncated"
    return starts[0], ends[-1]


@dataclass
class SpanReader:
    cfg: M.ModelConfig
    params: dict
    vocab: object
    max_seq_len: int = 512
    max_question_tokens: int = 64
    max_answer_tokens: int = DEFAULT_MAX_ANSWER_TOKENS

    def span_logits(self, ids, mask, rng=None, training=False):
        h = M.encode(self.params, ids, mask, self.cfg, rng=rng, training=training)
        out = T.linear(h, self.params["qa.w"], self.params["qa.b"])
        return out[..., 0], out[..., 1]

    def featurize(self, question, passage):
        return encode_qa(question, passage, self.vocab, self.max_seq_len, self.max_question_tokens)

    def read(self, question, passage):
        """Best answer span in ``passage`` for ``question``."""
        f = self.featurize(question, passage)
        if f.passage_len == 0:
            raise ValueError("empty passage")
        arr = np.asarray([f.ids])
        start, end = self.span_logits(arr, np.ones_like(arr))
        lo, hi = f.passage_start, f.passage_start + f.passage_len
        best = decode_best_span(start.data[0, lo:hi], end.data[0, lo:hi], self.max_answer_tokens)
        char_start = f.units[f.piece_unit[best.start]][0]
        char_end = f.units[f.piece_unit[best.end]][1]
        best.text = passage[char_start:char_end]
        return best


def finetune_mrc(backbone, cfg, vocab, examples, ft=MRC_DEFAULTS):
    """Train start/end projections (and the backbone) on QA examples.

    Returns ``(reader, stats)``; ``stats`` counts examples skipped because
    the answer was cut off by truncation or does not sit on token boundaries.
    """
    cfg = cfg.replace(dropout=ft.dropout)
    max_len = min(ft.max_seq_len, cfg.max_seq_len)
    params = _copy_params(backbone)
    params["qa.w"], params["qa.b"] = _head(cfg, 2, ft.seed, "span_head")
    reader = SpanReader(cfg, params, vocab, max_len, ft.max_question_tokens, ft.max_answer_tokens)
    feats, stats = [], {"used": 0, "truncated": 0, "unaligned": 0}
    for ex in examples:
        f = reader.featurize(ex.question, ex.passage)
        loc = locate_answer(f, ex.answer_start, len(ex.answer))
        if isinstance(loc, str):
            stats[loc] += 1
            continue
        f.start_token, f.end_token = loc
        feats.append(f)
    stats["used"] = len(feats)
    if not feats:
        raise ValueError("no trainable QA examples after tokenization")
    if stats["truncated"] or stats["unaligned"]:
        logger.warning("skipped %d truncated and %d unaligned QA examples", stats["truncated"], stats["unaligned"])

    def loss_fn(rows, rng):
        batch = [feats[r] for r in rows]
        ids = _pad_rows([f.ids for f in batch], PAD)
        lengths = np.array([len(f.ids) for f in batch])
        mask = (np.arange(ids.shape[1])[None, :] < lengths[:, None]).astype(np.int64)
        start, end = reader.span_logits(ids, mask, rng=rng, training=True)
        return span_loss(start, end, batch)

    _train_loop(params, loss_fn, len(feats), ft, "mrc")
    return reader, stats


def passage_bias(batch, width, dtype):
    """0 on passage tokens, a huge negative elsewhere."""
    bias = np.full((len(batch), width), M.NEG_INF, dtype=dtype)
    for i, f in enumerate(batch):
        bias[i, f.passage_start:f.passage_start + f.passage_len] = 0.0
    return bias


def span_loss(start_logits, end_logits, batch):
    """Cross-entropy of the gold start plus cross-entropy of the gold end, over passage tokens."""
    bias = passage_bias(batch, start_logits.shape[1], start_logits.dtype)
    starts = np.array([f.passage_start + f.start_token for f in batch])
    ends = np.array([f.passage_start + f.end_token for f in batch])
    return T.cross_entropy(start_logits + bias, starts) + T.cross_entropy(end_logits + bias, ends)


def evaluate_mrc(reader, examples):
    """Mean exact match and token F1 of ``reader`` over QA examples."""
    em, f1 = [], []
    for ex in examples:
        pred = reader.read(ex.question, ex.passage).text
        em.append(exact_match(pred, ex.answers))
        f1.append(squad_token_f1(pred, ex.answers))
    return {"exact_match": float(np.mean(em)), "f1": float(np.mean(f1)), "n": len(examples)}


# ---------------------------------------------------------------------------
# persistence

VOCAB_FILE = "vocab.txt"


def save_model(path, model):
    """Write a :class:`TokenClassifier` or :class:`SpanReader` as a checkpoint directory."""
    meta = {"model_config": model.cfg.to_dict(), "max_seq_len": model.max_seq_len}
    if isinstance(model, TokenClassifier):
        meta.update(kind="tagger", labels=list(model.labels))
    elif isinstance(model, SpanReader):
        meta.update(kind="span_reader", max_question_tokens=model.max_question_tokens,
                    max_answer_tokens=model.max_answer_tokens)
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    save_checkpoint(path, {k: p.data for k, p in model.params.items()}, meta)
    model.vocab.save(os.path.join(path, VOCAB_FILE))


def load_model(path):
    meta, _ = read_manifest(path)
    kind = meta.get("kind")
    if kind not in ("tagger", "span_reader"):
        raise ValueError(f"{path} holds a {kind!r} checkpoint, not a fine-tuned model")
    cfg = M.ModelConfig.from_dict(meta["model_config"])
    head = ("head", len(meta["labels"])) if kind == "tagger" else ("qa", 2)
    expected = {n: s for n, (_, s) in M.parameter_shapes(cfg, with_mlm_head=False).items()}
    expected[f"{head[0]}.w"] = (cfg.hidden_size, head[1])
    expected[f"{head[0]}.b"] = (head[1],)
    tensors, _ = load_checkpoint(path, expected)
    params = {n: T.Tensor(a, name=n) for n, a in tensors.items()}
    vocab = Vocabulary.load(os.path.join(path, VOCAB_FILE))
    if kind == "tagger":
        return TokenClassifier(cfg, params, meta["labels"], vocab, meta["max_seq_len"])
    return SpanReader(cfg, params, vocab, meta["max_seq_len"], meta["max_question_tokens"], meta["max_answer_tokens"])
