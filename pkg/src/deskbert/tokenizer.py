"""Byte-pair-encoding subword tokenizer.

Text is split on whitespace into words; each word is further split into
runs of word characters and runs of punctuation. Every piece that does not
start a word carries the ``##`` continuation prefix, so decoding can restore
the original spacing exactly.
"""

from __future__ import annotations

import logging
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIAL = len(SPECIAL_TOKENS)
CONT = "##"
VOCAB_FORMAT = "#deskbert-vocab v1"
DEFAULT_VOCAB_SIZE = 8192
DEFAULT_MAX_SEQ_LEN = 512


def _is_word_char(ch):
    return ch.isalnum() or ch == "_" or unicodedata.category(ch).startswith("M")


def split_units(text):
    """Pre-tokenize ``text`` into ``(piece, start, end, word_initial)`` tuples.

    Offsets index into ``text``. A unit is a maximal run of word characters
    or of punctuation inside one whitespace-delimited word.
    """
    units = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        k = i
        while k < j:
            kind = _is_word_char(text[k])
            m = k + 1
            while m < j and _is_word_char(text[m]) == kind:
                m += 1
            units.append((text[k:m], k, m, k == i))
            k = m
        i = j
    return units


def _symbols(unit, initial):
    return tuple(ch if (initial and idx == 0) else CONT + ch for idx, ch in enumerate(unit))


def _merge_symbol(left, right):
    return left + right[len(CONT):]


@dataclass
class TokenSequence:
    ids: list
    attention_mask: list

    def __len__(self):
        return len(self.ids)


@dataclass
class Vocabulary:
    tokens: list
    merges: list
    lowercase: bool = False
    token_to_id: dict = field(init=False, repr=False)
    merge_rank: dict = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the five special tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.merge_rank = {pair: r for r, pair in enumerate(self.merges)}
        self._cache = {}

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self):
        return len(self.tokens)

    def normalize(self, text):
        return text.lower() if self.lowercase else text

    def unit_to_ids(self, unit, initial):
        key = (unit, initial)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        syms = list(_symbols(unit, initial))
        while len(syms) > 1:
            best, best_rank = None, None
            for a, b in zip(syms, syms[1:]):
                r = self.merge_rank.get((a, b))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = (a, b), r
            if best is None:
                break
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                    merged.append(_merge_symbol(*best))
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            syms = merged
        ids = [self.token_to_id.get(s, UNK) for s in syms]
        self._cache[key] = ids
        return ids

    def tokenize_units(self, text):
        """Subword ids of ``text`` with a parallel list of unit indices."""
        ids, owners = [], []
        for u, (piece, _, _, initial) in enumerate(split_units(self.normalize(text))):
            for t in self.unit_to_ids(piece, initial):
                ids.append(t)
                owners.append(u)
        return ids, owners

    # -- persistence ------------------------------------------------------

    def to_text(self):
        lines = [VOCAB_FORMAT, f"lowercase={'true' if self.lowercase else 'false'}", "[tokens]"]
        lines.extend(self.tokens)
        lines.append("[merges]")
        lines.extend(f"{a} {b}" for a, b in self.merges)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.split("\n")
        if not lines or lines[0] != VOCAB_FORMAT:
            raise ValueError(f"unsupported vocabulary format header: {lines[0] if lines else ''!r}")
        if not lines[1].startswith("lowercase="):
            raise ValueError("missing lowercase flag")
        lowercase = lines[1].split("=", 1)[1] == "true"
        if lines[2] != "[tokens]":
            raise ValueError("missing [tokens] section")
        end = lines.index("[merges]")
        tokens = lines[3:end]
        merges = [tuple(line.split(" ")) for line in lines[end + 1:] if line]
        return cls(tokens=tokens, merges=merges, lowercase=lowercase)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def train_bpe(corpus, vocab_size=DEFAULT_VOCAB_SIZE, lowercase=False):
    """Learn merges from an iterable of text lines.

    Merges the most frequent adjacent symbol pair until the vocabulary
    reaches ``vocab_size`` or no pair occurs at least twice. Frequency ties
    go to the lexicographically smallest pair.
    """
    word_freq = Counter()
    for line in corpus:
        if lowercase:
            line = line.lower()
        for piece, _, _, initial in split_units(line):
            word_freq[_symbols(piece, initial)] += 1
    if not word_freq:
        raise ValueError("cannot train a tokenizer on an empty corpus")
    alphabet = sorted({s for word in word_freq for s in word})
    if vocab_size <= len(alphabet) + NUM_SPECIAL:
        raise ValueError(
            f"vocab_size {vocab_size} must exceed {len(alphabet)} base symbols + {NUM_SPECIAL} specials"
        )
    tokens = list(SPECIAL_TOKENS) + alphabet
    known = set(tokens)
    merges = []

    words = [list(w) for w in word_freq]
    freqs = list(word_freq.values())
    pair_counts = Counter()
    where = defaultdict(set)
    for wi, (w, f) in enumerate(zip(words, freqs)):
        for a, b in zip(w, w[1:]):
            pair_counts[(a, b)] += f
            where[(a, b)].add(wi)

    while len(tokens) < vocab_size and pair_counts:
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in pair_counts.items() if c == best_count)
        merged = _merge_symbol(*best)
        merges.append(best)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
        for wi in sorted(where.pop(best, ())):
            w, f = words[wi], freqs[wi]
            for a, b in zip(w, w[1:]):
                pair_counts[(a, b)] -= f
                if pair_counts[(a, b)] <= 0:
                    del pair_counts[(a, b)]
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and (w[i], w[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            words[wi] = out
            for a, b in zip(out, out[1:]):
                pair_counts[(a, b)] += f
                where[(a, b)].add(wi)
        pair_counts.pop(best, None)
    if len(tokens) < vocab_size:
        logger.info("BPE stopped at %d tokens: no pair occurs twice", len(tokens))
    return Vocabulary(tokens=tokens, merges=merges, lowercase=lowercase)


def encode(text, vocab, max_seq_len=DEFAULT_MAX_SEQ_LEN, pad_to=None):
    """``[CLS] pieces [SEP]`` truncated to ``max_seq_len`` and optionally padded."""
    if max_seq_len < 2:
        raise ValueError("max_seq_len must leave room for CLS and SEP")
    pieces, _ = vocab.tokenize_units(text)
    ids = [CLS] + pieces[: max_seq_len - 2] + [SEP]
    return pad_sequence(ids, pad_to)


def pad_sequence(ids, pad_to=None):
    mask = [1] * len(ids)
    if pad_to is not None and pad_to > len(ids):
        extra = pad_to - len(ids)
        ids = ids + [PAD] * extra
        mask = mask + [0] * extra
    return TokenSequence(ids=list(ids), attention_mask=mask)


def decode(ids, vocab):
    """Inverse of :func:`encode` up to whitespace normalization; specials are dropped."""
    out = []
    n = len(vocab)
    for i in ids:
        i = int(i)
        if i < 0 or i >= n:
            raise IndexError(f"token id {i} out of range for vocabulary of {n}")
        if i < NUM_SPECIAL:
            continue
        tok = vocab.tokens[i]
        if tok.startswith(CONT):
            out.append(tok[len(CONT):])
        else:
            if out:
                out.append(" ")
            out.append(tok)
    return "".join(out)


def batch_encode(texts, vocab, max_seq_len=DEFAULT_MAX_SEQ_LEN):
    """Encode and right-pad a list of texts to a common length.

    Returns ``(ids, mask)`` integer arrays of shape (batch, longest).
    """
    seqs = [encode(t, vocab, max_seq_len) for t in texts]
    longest = max(len(s) for s in seqs)
    ids = np.full((len(seqs), longest), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), longest), dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s.ids
        mask[r, : len(s)] = 1
    return ids, mask
