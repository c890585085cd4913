import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskbert import synthetic
from deskbert import tokenizer as tok
from deskbert.tokenizer import CLS, MASK, PAD, SEP, UNK


def norm_ws(s):
    return re.sub(r"\s+", " ", s).strip()


def test_split_units_offsets_and_word_initial():
    units = tok.split_units("Hà_Nội, đẹp!")
    assert [u[0] for u in units] == ["Hà_Nội", ",", "đẹp", "!"]
    assert [u[3] for u in units] == [True, False, True, False]
    for piece, s, e, _ in units:
        assert "Hà_Nội, đẹp!"[s:e] == piece


def test_first_merge_is_most_frequent_pair():
    v = tok.train_bpe(["ab ab ab"], vocab_size=50)
    assert v.merges[0] == ("a", "##b")
    assert "ab" in v.token_to_id


def test_ties_break_lexicographically():
    v = tok.train_bpe(["xy xy ab ab"], vocab_size=50)
    assert v.merges[0] == ("a", "##b")


def test_vocab_too_small_is_an_error():
    with pytest.raises(ValueError):
        tok.train_bpe(["abcdefghij"], vocab_size=3)


def test_empty_corpus_is_an_error():
    with pytest.raises(ValueError):
        tok.train_bpe([], vocab_size=100)


def test_specials_fixed(toy_vocab):
    assert toy_vocab.tokens[:5] == list(tok.SPECIAL_TOKENS)
    assert (PAD, UNK, CLS, SEP, MASK) == (0, 1, 2, 3, 4)


def test_reaches_requested_size_when_pairs_remain():
    texts = synthetic.pretraining_corpus(200, seed=0)
    assert len(tok.train_bpe(texts, vocab_size=120)) == 120


def test_training_is_deterministic():
    texts = synthetic.pretraining_corpus(30, seed=1)
    assert tok.train_bpe(texts, 150).to_text() == tok.train_bpe(texts, 150).to_text()


def test_empty_string_encodes_to_cls_sep(toy_vocab):
    assert tok.encode("", toy_vocab).ids == [CLS, SEP]
    assert tok.decode([CLS, SEP], toy_vocab) == ""


def test_unknown_character_maps_to_unk(toy_vocab):
    ids = tok.encode("Lan ☃", toy_vocab).ids
    assert UNK in ids


def test_encode_never_emits_mask_and_respects_length(toy_vocab):
    texts = synthetic.pretraining_corpus(50, seed=3)
    for t in texts:
        s = tok.encode(t, toy_vocab, max_seq_len=8, pad_to=12)
        assert MASK not in s.ids
        real = sum(s.attention_mask)
        assert real <= 8 and s.ids[0] == CLS and s.ids[real - 1] == SEP
        assert all(i == PAD for i in s.ids[real:]) and len(s.ids) == 12


def test_single_token_decodes(toy_vocab):
    tid = next(i for i, t in enumerate(toy_vocab.tokens) if len(t) > 1 and not t.startswith("##") and i >= 5)
    assert tok.decode([tid], toy_vocab) == toy_vocab.tokens[tid]


def test_decode_rejects_out_of_range(toy_vocab):
    with pytest.raises(IndexError):
        tok.decode([len(toy_vocab)], toy_vocab)


def test_round_trip_on_held_out_lines(toy_vocab):
    held_out = synthetic.pretraining_corpus(1000, seed=99)
    for line in held_out:
        assert tok.decode(tok.encode(line, toy_vocab).ids, toy_vocab) == norm_ws(line)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(synthetic.SUBJECTS + synthetic.OBJECTS + [".", "?", "ở"]), max_size=12))
def test_round_trip_property(toy_vocab, words):
    text = " ".join(words)
    assert tok.decode(tok.encode(text, toy_vocab).ids, toy_vocab) == norm_ws(text)


def test_serialization_round_trip(tmp_path, toy_vocab):
    path = tmp_path / "vocab.txt"
    toy_vocab.save(path)
    loaded = tok.Vocabulary.load(path)
    assert loaded.to_text() == toy_vocab.to_text()
    assert path.read_text(encoding="utf-8").splitlines()[0] == tok.VOCAB_FORMAT


def test_bad_header_rejected():
    with pytest.raises(ValueError):
        tok.Vocabulary.from_text("#other v9\n")


def test_lowercase_option():
    v = tok.train_bpe(["Ab ab AB"], vocab_size=40, lowercase=True)
    assert tok.encode("AB", v).ids == tok.encode("ab", v).ids


def test_batch_encode_pads(toy_vocab):
    ids, mask = tok.batch_encode(["Lan", "Lan đọc sách ."], toy_vocab)
    assert ids.shape == mask.shape and mask[0].sum() < mask[1].sum()
    assert (ids[mask == 0] == PAD).all()
