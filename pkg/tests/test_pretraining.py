import filecmp
import math

import numpy as np
import pytest

from deskbert import model as M
from deskbert import pretraining as P
from deskbert import synthetic
from deskbert import tensor as T
from deskbert import tokenizer as tok
from deskbert.rng import make_rng


def crafted_batch():
    """One 6-position row: CLS w w w w SEP with positions 2 and 4 masked."""
    original = np.array([[2, 5, 6, 7, 5, 3]])
    corrupted = np.array([[2, 5, 4, 7, 6, 3]])
    masked = np.array([[0, 0, 1, 0, 1, 0]], dtype=bool)
    action = np.array([[-1, -1, 0, -1, 1, -1]], dtype=np.int8)
    return P.MaskedBatch(original, corrupted, masked, action, np.ones((1, 6), dtype=np.int64))


def nll(row, target):
    m = max(row)
    return -(row[target] - m - math.log(sum(math.exp(x - m) for x in row)))


def test_mlm_loss_matches_per_position_oracle():
    mb = crafted_batch()
    logits = np.random.default_rng(0).standard_normal((1, 6, 8))
    expected = (nll(list(logits[0, 2]), 6) + nll(list(logits[0, 4]), 5)) / 2
    assert abs(P.mlm_loss(T.Tensor(logits), mb).item() - expected) < 1e-12


def test_mlm_uniform_logits_give_log_vocab():
    mb = crafted_batch()
    assert P.mlm_loss(T.Tensor(np.zeros((1, 6, 8192))), mb).item() == pytest.approx(math.log(8192), abs=1e-9)


def test_mlm_perfect_prediction_near_zero():
    mb = crafted_batch()
    logits = np.zeros((1, 6, 8))
    logits[0, np.arange(6), mb.original[0]] = 50.0
    assert P.mlm_loss(T.Tensor(logits), mb).item() < 1e-12


def test_mlm_needs_masked_positions():
    mb = crafted_batch()
    mb.masked[:] = False
    with pytest.raises(ValueError):
        P.mlm_loss(T.Tensor(np.zeros((1, 6, 8))), mb)


def bce(z, y):
    p = 1 / (1 + math.exp(-z))
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def test_rtd_loss_matches_per_position_oracle():
    z = [0.3, -1.2, 2.0, 0.0, -0.4, 1.1]
    y = [1, 0, 1, 1, 0, 1]
    pad = [1, 1, 1, 1, 1, 0]
    expected = sum(bce(a, b) for a, b, m in zip(z, y, pad) if m) / 5
    got = P.rtd_loss(T.Tensor(np.array([z])), np.array([y]), np.array([pad])).item()
    assert abs(got - expected) < 1e-12


def test_rtd_limits():
    y = np.array([[1, 0, 1, 0]])
    perfect = np.where(y == 1, 20.0, -20.0)
    assert P.rtd_loss(T.Tensor(perfect), y, np.ones_like(y)).item() < 1e-8
    assert P.rtd_loss(T.Tensor(np.zeros((1, 4))), y, np.ones_like(y)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_num_to_mask():
    assert P.num_to_mask(100, 0.15) == 15
    assert P.num_to_mask(1, 0.15) == 1
    assert P.num_to_mask(10, 0.15) == 2
    assert P.num_to_mask(30, 0.15) == 5


def test_corruption_respects_eligibility():
    ids = np.array([[2, 9, 9, 9, 9, 9, 9, 3, 0, 0]] * 50)
    mask = (ids > 0).astype(int)
    mb = P.mask_corrupt(ids, mask, 0.15, make_rng(0, "t"), vocab_size=30)
    assert not mb.masked[:, [0, 7, 8, 9]].any()
    assert (mb.masked.sum(1) == 1).all()
    changed = mb.corrupted != mb.original
    assert not (changed & ~mb.masked).any()
    assert (mb.corrupted[mb.action == P.ACTION_MASK] == tok.MASK).all()
    assert (mb.corrupted[mb.action == P.ACTION_KEEP] == mb.original[mb.action == P.ACTION_KEEP]).all()
    rand = mb.corrupted[mb.action == P.ACTION_RANDOM]
    assert ((rand >= tok.NUM_SPECIAL) & (rand < 30)).all()


def test_sequence_without_eligible_tokens_is_skipped():
    ids = np.array([[2, 3, 0], [2, 9, 3]])
    mb = P.mask_corrupt(ids, (ids > 0).astype(int), 0.15, make_rng(0, "t"), 20)
    assert mb.masked[0].sum() == 0 and mb.masked[1].sum() == 1


def test_discriminator_input_rules():
    mb = crafted_batch()
    probs = np.zeros((1, 6, 8))
    probs[0, 2, 6] = 1.0  # degenerate on the original token
    probs[0, 4, 1] = 1.0  # degenerate on a different token
    probs[0, [0, 1, 3, 5], 0] = 1.0
    x_d, labels = P.sample_discriminator_input(mb, probs, make_rng(0, "s"))
    assert x_d[0, 2] == 6 and labels[0, 2] == 1
    assert x_d[0, 4] == 1 and labels[0, 4] == 0
    assert (x_d[0, [0, 1, 3, 5]] == mb.original[0, [0, 1, 3, 5]]).all()
    assert (labels[0, [0, 1, 3, 5]] == 1).all()


def test_discriminator_input_requires_normalized_probs():
    mb = crafted_batch()
    with pytest.raises(ValueError):
        P.sample_discriminator_input(mb, np.full((1, 6, 8), 0.2), make_rng(0, "s"))


def test_gdes_embed_zero_delta_is_identity():
    eg = T.Tensor(np.random.default_rng(0).standard_normal((5, 3)), requires_grad=True)
    delta = T.Tensor(np.zeros((5, 3)), requires_grad=True)
    assert np.array_equal(P.gdes_embed(eg, delta).data, eg.data)
    with pytest.raises(ValueError):
        P.gdes_embed(eg, T.Tensor(np.zeros((4, 3))))


@pytest.fixture(scope="module")
def small_setup():
    texts = synthetic.pretraining_corpus(20, seed=0)
    vocab = tok.train_bpe(texts, 200)
    cfg = M.preset("tiny", vocab_size=len(vocab), max_seq_len=32, relative_distance=8, dtype="float64")
    ids, mask = tok.batch_encode(texts, vocab, cfg.max_seq_len)
    return texts, vocab, cfg, ids, mask


def test_dual_model_structure(small_setup):
    _, _, cfg, _, _ = small_setup
    dual = P.DualModel.build(cfg.replace(num_layers=2), seed=0)
    assert dual.gen_cfg.num_layers == 1
    assert np.all(dual.disc["embed.delta"].data == 0)
    assert dual.disc["embed.delta"].shape == dual.gen["embed.tokens"].shape
    assert "embed.tokens" not in dual.disc


def test_rtd_only_loss_leaves_generator_table_untouched(small_setup):
    _, _, cfg, ids, mask = small_setup
    dual = P.DualModel.build(cfg, seed=0)
    _, _, l_rtd, _ = P.forward_losses(dual, ids[:4], mask[:4], 50.0, seed=0, step=0, training=False)
    grads = T.grads_for(dual.gen, T.backward(l_rtd))
    assert not grads["embed.tokens"].any()
    assert T.grads_for(dual.disc, T.backward(l_rtd))["embed.delta"].any()


def test_joint_gradient_on_generator_table_equals_mlm_only(small_setup):
    _, _, cfg, ids, mask = small_setup
    dual = P.DualModel.build(cfg, seed=0)
    joint, *_ = P.forward_losses(dual, ids[:4], mask[:4], 50.0, seed=0, step=0)
    mlm_only, *_ = P.forward_losses(dual, ids[:4], mask[:4], 0.0, seed=0, step=0)
    gj = T.grads_for(dual.gen, T.backward(joint))["embed.tokens"]
    gm = T.grads_for(dual.gen, T.backward(mlm_only))["embed.tokens"]
    assert gm.any()
    assert np.max(np.abs(gj - gm)) <= 1e-6


def test_zero_weight_means_no_discriminator_gradient(small_setup):
    _, _, cfg, ids, mask = small_setup
    dual = P.DualModel.build(cfg, seed=0)
    total, *_ = P.forward_losses(dual, ids[:4], mask[:4], 0.0, seed=0, step=0)
    assert all(not g.any() for g in T.grads_for(dual.disc, T.backward(total)).values())


def test_discriminator_only_updates_keep_generator(small_setup):
    texts, vocab, cfg, _, _ = small_setup
    trainer = P.Pretrainer.from_texts(texts, vocab, cfg, P.pretrain_preset("desk", batch_size=4, seed=1))
    before = {k: v.data.copy() for k, v in trainer.dual.gen.items()}
    for _ in range(3):
        trainer.train_step(update_generator=False)
    assert all(np.array_equal(before[k], v.data) for k, v in trainer.dual.gen.items())


def test_step_total_matches_independent_recomputation(small_setup):
    texts, vocab, cfg, _, _ = small_setup
    trainer = P.Pretrainer.from_texts(texts, vocab, cfg, P.pretrain_preset("desk", batch_size=4, seed=2))
    r = trainer.train_step(keep=True)
    mb = r.batch
    mlm_terms = [nll(list(r.gen_logits[b, i]), mb.original[b, i]) for b, i in zip(*np.nonzero(mb.masked))]
    real = np.nonzero(mb.attention_mask)
    rtd_terms = [bce(r.disc_logits[b, i], r.rtd_labels[b, i]) for b, i in zip(*real)]
    mlm = sum(mlm_terms) / len(mlm_terms)
    rtd = sum(rtd_terms) / len(rtd_terms)
    assert abs(r.mlm - mlm) < 1e-6 and abs(r.rtd - rtd) < 1e-6
    assert abs(r.total - (mlm + 50.0 * rtd)) < 1e-6
    assert (r.rtd_labels[~mb.masked] == 1).all()


def test_presets_record_full_scale_settings():
    assert P.pretrain_preset("base").batch_size == 8192
    assert P.pretrain_preset("xsmall").peak_lr == 6e-4 and P.pretrain_preset("xsmall").total_steps == 500_000
    assert P.pretrain_preset("large").peak_lr == 3e-4 and P.pretrain_preset("large").total_steps == 250_000
    assert P.pretrain_preset("desk").rtd_weight == 50.0
    with pytest.raises(ValueError):
        P.PretrainConfig(rtd_weight=-1.0)


def test_resume_is_bit_exact(tmp_path, small_setup):
    texts, vocab, cfg, _, _ = small_setup
    pcfg = P.pretrain_preset("desk", batch_size=4, total_steps=12, seed=3)
    straight = P.Pretrainer.from_texts(texts, vocab, cfg, pcfg)
    full = [straight.train_step() for _ in range(12)]
    first = P.Pretrainer.from_texts(texts, vocab, cfg, pcfg)
    head = [first.train_step() for _ in range(7)]
    first.save(tmp_path / "ck")
    resumed = P.Pretrainer.load(tmp_path / "ck", first.ids, first.mask)
    tail = [resumed.train_step() for _ in range(5)]
    for a, b in zip(full, head + tail):
        assert (a.mlm, a.rtd, a.total, a.lr) == (b.mlm, b.rtd, b.total, b.lr)
    for name, p in straight.dual.disc.items():
        assert np.array_equal(p.data, resumed.dual.disc[name].data)


def test_save_load_save_is_byte_identical(tmp_path, small_setup):
    texts, vocab, cfg, _, _ = small_setup
    trainer = P.Pretrainer.from_texts(texts, vocab, cfg, P.pretrain_preset("desk", batch_size=4, seed=0))
    trainer.train_step()
    trainer.save(tmp_path / "a")
    P.Pretrainer.load(tmp_path / "a", trainer.ids, trainer.mask).save(tmp_path / "b")
    for f in ("manifest.txt", "tensors.bin"):
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)


def test_load_rejects_different_data(tmp_path, small_setup):
    texts, vocab, cfg, _, _ = small_setup
    trainer = P.Pretrainer.from_texts(texts, vocab, cfg, P.pretrain_preset("desk", batch_size=4))
    trainer.save(tmp_path / "a")
    with pytest.raises(ValueError):
        P.Pretrainer.load(tmp_path / "a", trainer.ids[:3], trainer.mask[:3])


def test_backbone_from_checkpoint_composes_tables(tmp_path, small_setup):
    texts, vocab, cfg, _, _ = small_setup
    trainer = P.Pretrainer.from_texts(texts, vocab, cfg, P.pretrain_preset("desk", batch_size=4))
    trainer.train_step()
    trainer.save(tmp_path / "a")
    bcfg, params = P.backbone_from_checkpoint(tmp_path / "a")
    expected = trainer.dual.discriminator_backbone()
    assert bcfg == trainer.dual.disc_cfg and set(params) == set(expected)
    assert all(np.array_equal(params[k].data, expected[k].data) for k in params)


def test_metrics_log_format(tmp_path, small_setup):
    texts, vocab, cfg, _, _ = small_setup
    trainer = P.Pretrainer.from_texts(texts, vocab, cfg, P.pretrain_preset("desk", batch_size=4))
    log = tmp_path / "m.csv"
    trainer.train(3, log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0] == "step,L_MLM,L_RTD,L,lr" and len(lines) == 4
    step, mlm, rtd, total, lr = lines[1].split(",")
    assert step == "1" and float(total) == pytest.approx(float(mlm) + 50 * float(rtd))
