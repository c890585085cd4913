"""Generator/discriminator pre-training: MLM, replaced-token detection and
gradient-disentangled embedding sharing.

The generator is a shallow MLM encoder. Its samples at the masked
positions form the discriminator input, and the discriminator predicts for
every position whether the token is the original. The discriminator reads
the generator's token table through a stop-gradient plus its own delta
table, so only the MLM loss moves the shared embeddings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .optim import AdamWState, adamw_step, clip_grad_norm, linear_warmup_decay
from .rng import make_rng
from .tokenizer import MASK, NUM_SPECIAL, batch_encode

logger = logging.getLogger(__name__)

ACTION_NONE, ACTION_MASK, ACTION_RANDOM, ACTION_KEEP = -1, 0, 1, 2


@dataclass(frozen=True)
class PretrainConfig:
    preset: str = "desk"
    rtd_weight: float = 50.0
    mask_rate: float = 0.15
    batch_size: int = 16
    peak_lr: float = 6e-4
    warmup_frac: float = 0.06
    total_steps: int = 500
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    clip_norm: float | None = 1.0
    generator_layers: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.rtd_weight < 0:
            raise ValueError("rtd_weight must be >= 0")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must be in (0, 1)")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


# Full-scale settings are recorded for reference; only ``desk`` is meant to run here.
PRETRAIN_PRESETS = {
    "xsmall": PretrainConfig(preset="xsmall", batch_size=8192, peak_lr=6e-4, total_steps=500_000),
    "base": PretrainConfig(preset="base", batch_size=8192, peak_lr=6e-4, total_steps=500_000),
    "large": PretrainConfig(preset="large", batch_size=8192, peak_lr=3e-4, total_steps=250_000),
    "desk": PretrainConfig(preset="desk", batch_size=16, peak_lr=1e-2, total_steps=500),
}


def pretrain_preset(name, **overrides):
    try:
        cfg = PRETRAIN_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown pre-training preset {name!r}; choose from {sorted(PRETRAIN_PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# corruption and losses


@dataclass
class MaskedBatch:
    original: np.ndarray
    corrupted: np.ndarray
    masked: np.ndarray
    action: np.ndarray
    attention_mask: np.ndarray

    @property
    def num_masked(self):
        return int(self.masked.sum())


def num_to_mask(eligible, mask_rate):
    """``max(1, round(mask_rate * eligible))`` with halves rounded up."""
    return max(1, int(math.floor(mask_rate * eligible + 0.5)))


def mask_corrupt(ids, attention_mask, mask_rate, rng, vocab_size):
    """Select and corrupt the masked set of each sequence.

    Eligible positions are real (unpadded) non-special tokens. Within the
    selected set, 80% become MASK, 10% a uniform random non-special token,
    10% stay unchanged.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must be in (0, 1)")
    ids = np.asarray(ids)
    attention_mask = np.asarray(attention_mask)
    corrupted = ids.copy()
    masked = np.zeros(ids.shape, dtype=bool)
    action = np.full(ids.shape, ACTION_NONE, dtype=np.int8)
    for r in range(ids.shape[0]):
        eligible = np.nonzero((attention_mask[r] > 0) & (ids[r] >= NUM_SPECIAL))[0]
        if eligible.size == 0:
            logger.warning("sequence %d has no maskable tokens; skipped", r)
            continue
        chosen = np.sort(rng.choice(eligible, size=num_to_mask(eligible.size, mask_rate), replace=False))
        u = rng.random(chosen.size)
        rand_tokens = rng.integers(NUM_SPECIAL, vocab_size, size=chosen.size)
        masked[r, chosen] = True
        for pos, ui, tok in zip(chosen, u, rand_tokens):
            if ui < 0.8:
                action[r, pos] = ACTION_MASK
                corrupted[r, pos] = MASK
            elif ui < 0.9:
                action[r, pos] = ACTION_RANDOM
                corrupted[r, pos] = tok
            else:
                action[r, pos] = ACTION_KEEP
    return MaskedBatch(ids.copy(), corrupted, masked, action, attention_mask.copy())


def mlm_loss(logits, mb):
    """Mean negative log-likelihood of the original tokens over the masked set."""
    if mb.num_masked == 0:
        raise ValueError("no masked positions in batch")
    targets = np.where(mb.masked, mb.original, -100)
    return T.cross_entropy(logits, targets, ignore_index=-100)


def sample_discriminator_input(mb, generator_probs, rng):
    """Replace masked positions with generator samples.

    Returns ``(x_d, labels)`` where ``labels`` is 1 where the discriminator
    input equals the original token and 0 where it was replaced.
    """
    probs = np.asarray(generator_probs, dtype=np.float64)
    x_d = mb.original.copy()
    rows, cols = np.nonzero(mb.masked)
    if rows.size:
        p = probs[rows, cols]
        sums = p.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-4):
            raise ValueError("generator probabilities are not normalized")
        cdf = np.cumsum(p, axis=-1)
        u = rng.random(rows.size) * cdf[:, -1]
        draws = np.array([np.searchsorted(c, x, side="right") for c, x in zip(cdf, u)], dtype=x_d.dtype)
        x_d[rows, cols] = np.minimum(draws, p.shape[-1] - 1)
    labels = (x_d == mb.original).astype(np.int64)
    return x_d, labels


def rtd_loss(disc_logits, rtd_labels, pad_mask):
    """Mean binary cross-entropy over all unpadded positions; "original" is the positive class."""
    return T.bce_with_logits(disc_logits, rtd_labels, pad_mask)


def gdes_embed(generator_table, delta_table):
    """Discriminator embedding: frozen view of the generator table plus a trainable delta."""
    if generator_table.shape != delta_table.shape:
        raise ValueError(f"shape mismatch {generator_table.shape} vs {delta_table.shape}")
    return T.stop_gradient(generator_table) + delta_table


# ---------------------------------------------------------------------------
# the dual model


@dataclass
class DualModel:
    gen_cfg: M.ModelConfig
    disc_cfg: M.ModelConfig
    gen: dict
    disc: dict

    @classmethod
    def build(cls, disc_cfg, seed=0, generator_layers=None):
        layers = generator_layers or max(1, disc_cfg.num_layers // 2)
        gen_cfg = disc_cfg.replace(num_layers=layers)
        gen = M.init_params(gen_cfg, seed, label="generator")
        disc = M.init_params(disc_cfg, seed, with_token_table=False, with_mlm_head=False, label="discriminator")
        dt = disc_cfg.np_dtype
        disc["embed.delta"] = T.Tensor(np.zeros((disc_cfg.vocab_size, disc_cfg.hidden_size), dtype=dt),
                                       requires_grad=True, name="embed.delta")
        rng = make_rng(seed, "init", "rtd_head")
        disc["rtd.w"] = T.Tensor((rng.standard_normal((disc_cfg.hidden_size, 1)) * disc_cfg.init_std).astype(dt),
                                 requires_grad=True, name="rtd.w")
        disc["rtd.b"] = T.Tensor(np.zeros((1,), dtype=dt), requires_grad=True, name="rtd.b")
        return cls(gen_cfg, disc_cfg, gen, disc)

    def discriminator_table(self):
        return gdes_embed(self.gen["embed.tokens"], self.disc["embed.delta"])

    def generator_logits(self, ids, mask, rng=None, training=False):
        h = M.encode(self.gen, ids, mask, self.gen_cfg, rng=rng, training=training)
        return M.emd_mlm_logits(h, self.gen, self.gen_cfg, mask=mask, rng=rng, training=training)

    def discriminator_logits(self, ids, mask, rng=None, training=False):
        h = M.encode(self.disc, ids, mask, self.disc_cfg, token_table=self.discriminator_table(),
                     rng=rng, training=training)
        b, length, _ = h.shape
        return T.linear(h, self.disc["rtd.w"], self.disc["rtd.b"]).reshape(b, length)

    def discriminator_backbone(self):
        """Standalone encoder params for fine-tuning, with the composed token table."""
        out = {name: T.Tensor(p.data.copy(), requires_grad=True, name=name)
               for name, p in self.disc.items() if not name.startswith(("rtd.", "embed.delta"))}
        table = self.gen["embed.tokens"].data + self.disc["embed.delta"].data
        out["embed.tokens"] = T.Tensor(table, requires_grad=True, name="embed.tokens")
        return out


@dataclass
class StepResult:
    step: int
    mlm: float
    rtd: float
    total: float
    lr: float
    batch: MaskedBatch = field(repr=False, default=None)
    gen_logits: np.ndarray = field(repr=False, default=None)
    disc_input: np.ndarray = field(repr=False, default=None)
    rtd_labels: np.ndarray = field(repr=False, default=None)
    disc_logits: np.ndarray = field(repr=False, default=None)
    grads: dict = field(repr=False, default=None)


def forward_losses(dual, ids, mask, rtd_weight, seed, step, mask_rate=0.15, training=True, mlm_weight=1.0):
    """Run corruption, both models and both losses for one batch.

    Every random draw comes from streams keyed by ``(seed, purpose, step)``.
    Returns ``(total, mlm, rtd, intermediates)`` with the losses as graph
    tensors.
    """
    mb = mask_corrupt(ids, mask, mask_rate, make_rng(seed, "corrupt", step), dual.gen_cfg.vocab_size)
    drop_rng = make_rng(seed, "dropout", step)
    gen_logits = dual.generator_logits(mb.corrupted, mask, rng=drop_rng, training=training)
    l_mlm = mlm_loss(gen_logits, mb)
    probs = T.softmax(T.stop_gradient(gen_logits), axis=-1).data
    x_d, labels = sample_discriminator_input(mb, probs, make_rng(seed, "sample", step))
    disc_logits = dual.discriminator_logits(x_d, mask, rng=drop_rng, training=training)
    l_rtd = rtd_loss(disc_logits, labels, mask)
    total = l_mlm * float(mlm_weight) + l_rtd * float(rtd_weight)
    inter = dict(batch=mb, gen_logits=gen_logits.data, disc_input=x_d, rtd_labels=labels,
                 disc_logits=disc_logits.data)
    return total, l_mlm, l_rtd, inter


class Pretrainer:
    """Owns the dual model, both optimizers and the step counter."""

    def __init__(self, dual, cfg, ids, mask):
        self.dual = dual
        self.cfg = cfg
        self.ids = np.asarray(ids)
        self.mask = np.asarray(mask)
        self.step = 0
        kw = dict(lr=cfg.peak_lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
                  weight_decay=cfg.weight_decay)
        self.gen_opt = AdamWState(**kw)
        self.disc_opt = AdamWState(**kw)

    @classmethod
    def from_texts(cls, texts, vocab, model_cfg, cfg):
        ids, mask = batch_encode(texts, vocab, model_cfg.max_seq_len)
        dual = DualModel.build(model_cfg.replace(vocab_size=len(vocab)), cfg.seed, cfg.generator_layers)
        return cls(dual, cfg, ids, mask)

    @property
    def batches_per_epoch(self):
        return max(1, math.ceil(len(self.ids) / self.cfg.batch_size))

    def batch_for(self, step):
        """Rows for 0-based ``step``: epoch-shuffled, keyed by (epoch, batch index)."""
        epoch, index = divmod(step, self.batches_per_epoch)
        order = make_rng(self.cfg.seed, "shuffle", epoch).permutation(len(self.ids))
        rows = order[index * self.cfg.batch_size:(index + 1) * self.cfg.batch_size]
        ids, mask = self.ids[rows], self.mask[rows]
        width = int(mask.sum(axis=1).max())
        return ids[:, :width], mask[:, :width]

    def lr_at(self, step):
        return linear_warmup_decay(step, self.cfg.peak_lr, self.cfg.total_steps, self.cfg.warmup_frac)

    def train_step(self, update_generator=True, update_discriminator=True, mlm_weight=1.0, keep=False):
        ids, mask = self.batch_for(self.step)
        step = self.step + 1
        total, l_mlm, l_rtd, inter = forward_losses(
            self.dual, ids, mask, self.cfg.rtd_weight, self.cfg.seed, self.step,
            self.cfg.mask_rate, training=True, mlm_weight=mlm_weight,
        )
        values = (l_mlm.item(), l_rtd.item(), total.item())
        if not all(np.isfinite(values)):
            raise T.NonFiniteError(f"non-finite loss at step {step}: mlm={values[0]} rtd={values[1]}")
        grads = T.backward(total)
        lr = self.lr_at(step)
        gen_g, _ = clip_grad_norm(T.grads_for(self.dual.gen, grads), self.cfg.clip_norm)
        disc_g, _ = clip_grad_norm(T.grads_for(self.dual.disc, grads), self.cfg.clip_norm)
        if update_generator:
            adamw_step(self.dual.gen, gen_g, self.gen_opt, lr)
        if update_discriminator:
            adamw_step(self.dual.disc, disc_g, self.disc_opt, lr)
        self.step = step
        result = StepResult(step, *values, lr)
        if keep:
            result.grads = {**{"gen." + k: v for k, v in gen_g.items()},
                            **{"disc." + k: v for k, v in disc_g.items()}}
            for k, v in inter.items():
                setattr(result, k, v)
        return result

    def train(self, num_steps, log_path=None, callback=None):
        results = []
        for _ in range(num_steps):
            r = self.train_step()
            results.append(r)
            if log_path is not None:
                append_metrics(log_path, r)
            if callback is not None:
                callback(r)
        return results

    # -- persistence ------------------------------------------------------

    def state_tensors(self):
        out = {}
        for prefix, params in (("gen", self.dual.gen), ("disc", self.dual.disc)):
            for name, p in params.items():
                out[f"{prefix}.{name}"] = p.data
        for prefix, opt, params in (("gen", self.gen_opt, self.dual.gen), ("disc", self.disc_opt, self.dual.disc)):
            for name in params:
                if name in opt.m:
                    out[f"opt.{prefix}.m.{name}"] = opt.m[name]
                    out[f"opt.{prefix}.v.{name}"] = opt.v[name]
        return out

    def save(self, path):
        meta = {
            "kind": "pretrain",
            "step": self.step,
            "rng_cursor": {"seed": self.cfg.seed, "step": self.step},
            "pretrain_config": self.cfg.to_dict(),
            "generator_config": self.dual.gen_cfg.to_dict(),
            "discriminator_config": self.dual.disc_cfg.to_dict(),
            "optimizer_steps": {"gen": self.gen_opt.step, "disc": self.disc_opt.step},
            "data_fingerprint": data_fingerprint(self.ids, self.mask),
        }
        save_checkpoint(path, self.state_tensors(), meta)

    @classmethod
    def load(cls, path, ids, mask):
        meta_probe, _ = read_manifest(path)
        gen_cfg = M.ModelConfig.from_dict(meta_probe["generator_config"])
        disc_cfg = M.ModelConfig.from_dict(meta_probe["discriminator_config"])
        expected = expected_shapes(gen_cfg, disc_cfg)
        tensors, meta = load_checkpoint(path, expected)
        if meta.get("kind") != "pretrain":
            raise ValueError(f"{path} is not a pre-training checkpoint")
        if meta["data_fingerprint"] != data_fingerprint(ids, mask):
            raise ValueError("training data differs from the data this checkpoint was trained on")
        cfg = PretrainConfig(**meta["pretrain_config"])
        dual = DualModel(gen_cfg, disc_cfg, {}, {})
        for prefix, target in (("gen", dual.gen), ("disc", dual.disc)):
            for name, arr in tensors.items():
                if name.startswith(prefix + "."):
                    short = name[len(prefix) + 1:]
                    target[short] = T.Tensor(arr, requires_grad=True, name=short)
        trainer = cls(dual, cfg, ids, mask)
        trainer.step = meta["step"]
        for prefix, opt in (("gen", trainer.gen_opt), ("disc", trainer.disc_opt)):
            opt.step = meta["optimizer_steps"][prefix]
            for kind, store in (("m", opt.m), ("v", opt.v)):
                tag = f"opt.{prefix}.{kind}."
                for name, arr in tensors.items():
                    if name.startswith(tag):
                        store[name[len(tag):]] = arr
        return trainer


def expected_shapes(gen_cfg, disc_cfg):
    shapes = {f"gen.{n}": s for n, (_, s) in M.parameter_shapes(gen_cfg).items()}
    for n, (_, s) in M.parameter_shapes(disc_cfg, with_token_table=False, with_mlm_head=False).items():
        shapes[f"disc.{n}"] = s
    shapes["disc.embed.delta"] = (disc_cfg.vocab_size, disc_cfg.hidden_size)
    shapes["disc.rtd.w"] = (disc_cfg.hidden_size, 1)
    shapes["disc.rtd.b"] = (1,)
    return shapes


def data_fingerprint(ids, mask):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ids, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(mask, dtype="<i8").tobytes())
    return h.hexdigest()


METRICS_HEADER = "step,L_MLM,L_RTD,L,lr"


def append_metrics(path, r):
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if new:
            fh.write(METRICS_HEADER + "\n")
        fh.write(f"{r.step},{r.mlm!r},{r.rtd!r},{r.total!r},{r.lr!r}\n")


def discriminator_accuracy(dual, ids, mask, seed, mask_rate=0.15):
    """Position-level RTD accuracy on a freshly corrupted batch (no dropout)."""
    ids, mask = np.asarray(ids), np.asarray(mask)
    mb = mask_corrupt(ids, mask, mask_rate, make_rng(seed, "eval-corrupt"), dual.gen_cfg.vocab_size)
    logits = dual.generator_logits(mb.corrupted, mask)
    probs = T.softmax(logits, axis=-1).data
    x_d, labels = sample_discriminator_input(mb, probs, make_rng(seed, "eval-sample"))
    pred = (dual.discriminator_logits(x_d, mask).data > 0).astype(np.int64)
    real = mask > 0
    return float((pred[real] == labels[real]).mean())


def replaced_token_accuracy(dual, ids, mask, seed, mask_rate=0.15):
    """Balanced RTD accuracy: mean of recall on original and on replaced positions."""
    ids, mask = np.asarray(ids), np.asarray(mask)
    mb = mask_corrupt(ids, mask, mask_rate, make_rng(seed, "eval-corrupt"), dual.gen_cfg.vocab_size)
    probs = T.softmax(dual.generator_logits(mb.corrupted, mask), axis=-1).data
    x_d, labels = sample_discriminator_input(mb, probs, make_rng(seed, "eval-sample"))
    pred = (dual.discriminator_logits(x_d, mask).data > 0).astype(np.int64)
    real = mask > 0
    recalls = [float((pred[real & (labels == c)] == c).mean()) for c in (0, 1) if (real & (labels == c)).any()]
    return float(np.mean(recalls))



def backbone_from_checkpoint(path):
    """Discriminator encoder config and params from a pre-training checkpoint, ready to fine-tune."""
    meta, _ = read_manifest(path)
    if meta.get("kind") != "pretrain":
        raise ValueError(f"{path} is not a pre-training checkpoint")
    gen_cfg = M.ModelConfig.from_dict(meta["generator_config"])
    disc_cfg = M.ModelConfig.from_dict(meta["discriminator_config"])
    tensors, _ = load_checkpoint(path, expected_shapes(gen_cfg, disc_cfg))
    params = {}
    for name, arr in tensors.items():
        if name.startswith("disc.") and not name.startswith(("disc.rtd.", "disc.embed.delta")):
            params[name[5:]] = T.Tensor(arr, requires_grad=True, name=name[5:])
    table = tensors["gen.embed.tokens"] + tensors["disc.embed.delta"]
    params["embed.tokens"] = T.Tensor(table, requires_grad=True, name="embed.tokens")
    return disc_cfg, params
