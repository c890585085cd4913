"""Encoder with disentangled attention and an enhanced mask decoder.

Parameters live in a flat ``{name: Tensor}`` dict so the optimizer,
checkpoint code and gradient checks can all treat them uniformly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import make_rng
from .tensor import Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 2
    hidden_size: int = 32
    intermediate_size: int | None = None
    head_dim: int | None = None
    vocab_size: int = 1000
    max_seq_len: int = 512
    relative_distance: int | None = None
    dropout: float = 0.1
    emd_layers: int = 0
    tie_mlm_projection: bool = True
    layer_norm_eps: float = 1e-7
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.head_dim is None:
            if self.hidden_size % self.num_heads:
                raise ValueError(
                    f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}; "
                    "set head_dim explicitly"
                )
            object.__setattr__(self, "head_dim", self.hidden_size // self.num_heads)
        if self.intermediate_size is None:
            object.__setattr__(self, "intermediate_size", 4 * self.hidden_size)
        if self.relative_distance is None:
            object.__setattr__(self, "relative_distance", max(1, self.max_seq_len // 4))
        if self.relative_distance < 1:
            raise ValueError("relative_distance must be >= 1")
        if self.num_layers < 1 or self.max_seq_len < 2:
            raise ValueError("need at least one layer and max_seq_len >= 2")

    @property
    def attention_size(self):
        return self.num_heads * self.head_dim

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


FULL_VOCAB_SIZE = 128_000

PRESETS = {
    "xsmall": ModelConfig(num_layers=6, num_heads=12, hidden_size=768, vocab_size=FULL_VOCAB_SIZE),
    "base": ModelConfig(num_layers=12, num_heads=12, hidden_size=768, vocab_size=FULL_VOCAB_SIZE),
    # 1024 is not a multiple of 12 heads; keep the 64-wide heads of the other presets.
    "large": ModelConfig(
        num_layers=24, num_heads=12, hidden_size=1024, head_dim=64, vocab_size=FULL_VOCAB_SIZE
    ),
    "desk": ModelConfig(num_layers=2, num_heads=4, hidden_size=64, vocab_size=1000, max_seq_len=128),
    "tiny": ModelConfig(
        num_layers=2, num_heads=2, hidden_size=16, vocab_size=64, max_seq_len=16,
        relative_distance=4, dropout=0.0,
    ),
}

# Backbone sizes stated alongside the presets, in parameters.
STATED_BACKBONE_PARAMS = {"xsmall": 22_000_000, "base": 86_000_000, "large": 304_000_000}


def preset(name, **overrides):
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


def count_backbone_parameters(cfg):
    """Trainable parameters of the transformer stack, excluding the token table and MLM head.

    With attention width A = heads * head_dim, per layer: Q/K/V projections
    3(HA + A), output projection AH + H, two layer norms 4H, feed-forward
    2HI + I + H. Shared across layers: the relative position table 2kH, the
    embedding layer norm 2H and the final layer norm 2H.
    """
    h, i, k = cfg.hidden_size, cfg.intermediate_size, cfg.relative_distance
    a = cfg.attention_size
    per_layer = 3 * (h * a + a) + a * h + h + 4 * h + 2 * h * i + i + h
    return cfg.num_layers * per_layer + 2 * k * h + 4 * h


# ---------------------------------------------------------------------------
# initialization


def _layer_shapes(prefix, h, a, inter):
    return {
        f"{prefix}.ln1.gamma": ("ones", (h,)),
        f"{prefix}.ln1.beta": ("zeros", (h,)),
        f"{prefix}.attn.wq": ("normal", (h, a)),
        f"{prefix}.attn.bq": ("zeros", (a,)),
        f"{prefix}.attn.wk": ("normal", (h, a)),
        f"{prefix}.attn.bk": ("zeros", (a,)),
        f"{prefix}.attn.wv": ("normal", (h, a)),
        f"{prefix}.attn.bv": ("zeros", (a,)),
        f"{prefix}.attn.wo": ("normal", (a, h)),
        f"{prefix}.attn.bo": ("zeros", (h,)),
        f"{prefix}.ln2.gamma": ("ones", (h,)),
        f"{prefix}.ln2.beta": ("zeros", (h,)),
        f"{prefix}.ffn.w1": ("normal", (h, inter)),
        f"{prefix}.ffn.b1": ("zeros", (inter,)),
        f"{prefix}.ffn.w2": ("normal", (inter, h)),
        f"{prefix}.ffn.b2": ("zeros", (h,)),
    }


def parameter_shapes(cfg, with_token_table=True, with_mlm_head=True):
    """Ordered ``{name: (init_kind, shape)}`` for a model built from ``cfg``."""
    h, v = cfg.hidden_size, cfg.vocab_size
    shapes = {}
    if with_token_table:
        shapes["embed.tokens"] = ("normal", (v, h))
    shapes["embed.ln.gamma"] = ("ones", (h,))
    shapes["embed.ln.beta"] = ("zeros", (h,))
    shapes["rel.table"] = ("normal", (2 * cfg.relative_distance, h))
    for i in range(cfg.num_layers):
        shapes.update(_layer_shapes(f"layers.{i}", h, cfg.attention_size, cfg.intermediate_size))
    shapes["final_ln.gamma"] = ("ones", (h,))
    shapes["final_ln.beta"] = ("zeros", (h,))
    if with_mlm_head:
        shapes["emd.abs_pos"] = ("normal", (cfg.max_seq_len, h))
        for j in range(cfg.emd_layers):
            shapes.update(_layer_shapes(f"emd.layers.{j}", h, cfg.attention_size, cfg.intermediate_size))
        if not cfg.tie_mlm_projection:
            shapes["mlm.proj"] = ("normal", (h, v))
        shapes["mlm.bias"] = ("zeros", (v,))
    return shapes


def init_params(cfg, seed=0, with_token_table=True, with_mlm_head=True, label="model"):
    rng = make_rng(seed, "init", label)
    dt = cfg.np_dtype
    params = {}
    for name, (kind, shape) in parameter_shapes(cfg, with_token_table, with_mlm_head).items():
        if kind == "normal":
            data = (rng.standard_normal(shape) * cfg.init_std).astype(dt)
        elif kind == "ones":
            data = np.ones(shape, dtype=dt)
        else:
            data = np.zeros(shape, dtype=dt)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def num_parameters(params):
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# attention


def relative_position_bucket(i, j, k):
    """Bucket in ``[0, 2k)`` for query position ``i`` and key position ``j``."""
    if k < 1:
        raise ValueError("distance limit must be >= 1")
    d = i - j
    if d <= -k:
        return 0
    if d >= k:
        return 2 * k - 1
    return d + k


def relative_bucket_matrix(length, k):
    """``(length, length)`` matrix of :func:`relative_position_bucket` values."""
    pos = np.arange(length)
    d = pos[:, None] - pos[None, :]
    return np.where(d <= -k, 0, np.where(d >= k, 2 * k - 1, d + k)).astype(np.int64)


def _heads(x, nh):
    b, length, a = x.shape
    return x.reshape(b, length, nh, a // nh).transpose(0, 2, 1, 3)


def attention_logits(hidden, lp, rel_table, cfg):
    """Scaled content->content + content->position + position->content logits.

    ``lp`` maps short names (``wq``, ``bq``, ...) to the layer's tensors.
    Returns ``(logits, v)`` with logits shaped (batch, heads, seq, seq).
    Relative positions are projected with the content weights but without
    biases, so a zero position table contributes exactly nothing.
    """
    b, length, h = hidden.shape
    nh, d = cfg.num_heads, cfg.head_dim
    k = cfg.relative_distance
    q = _heads(T.linear(hidden, lp["wq"], lp["bq"]), nh)
    key = _heads(T.linear(hidden, lp["wk"], lp["bk"]), nh)
    v = _heads(T.linear(hidden, lp["wv"], lp["bv"]), nh)

    pos_k = T.matmul(rel_table, lp["wk"]).reshape(2 * k, nh, d).transpose(1, 2, 0)  # (nh, d, 2k)
    pos_q = T.matmul(rel_table, lp["wq"]).reshape(2 * k, nh, d).transpose(1, 2, 0)
    idx = relative_bucket_matrix(length, k)

    c2c = T.matmul(q, key.swapaxes(-1, -2))
    c2p = T.take_along_last(T.matmul(q, pos_k), idx)
    p2c = T.take_along_last(T.matmul(key, pos_q), idx).swapaxes(-1, -2)
    scale = 1.0 / np.sqrt(3.0 * d)
    logits = (c2c + c2p + p2c) * scale
    return logits, v


def mask_bias(mask, dtype):
    """Additive bias (batch, 1, 1, seq): 0 at real keys, a huge negative at padding."""
    mask = np.asarray(mask)
    return np.where(mask[:, None, None, :] > 0, 0.0, NEG_INF).astype(dtype)


def disentangled_attention(hidden, lp, rel_table, mask, cfg, rng=None, training=False, return_probs=False):
    b, length, h = hidden.shape
    if h != cfg.hidden_size:
        raise ValueError(f"hidden size {h} does not match config {cfg.hidden_size}")
    mask = np.asarray(mask)
    if mask.shape != (b, length):
        raise ValueError(f"mask shape {mask.shape} does not match hidden {(b, length)}")
    logits, v = attention_logits(hidden, lp, rel_table, cfg)
    probs = T.softmax(logits + mask_bias(mask, hidden.dtype), axis=-1)
    dropped = T.dropout(probs, cfg.dropout, rng, training) if training else probs
    ctx = T.matmul(dropped, v).transpose(0, 2, 1, 3).reshape(b, length, cfg.attention_size)
    out = T.linear(ctx, lp["wo"], lp["bo"])
    return (out, probs) if return_probs else out


def _sub(params, prefix):
    n = len(prefix) + 1
    return {name[n:]: p for name, p in params.items() if name.startswith(prefix + ".")}


def transformer_layer(x, params, prefix, rel_table, mask, cfg, rng=None, training=False):
    """Pre-norm block: attention then feed-forward, each with a residual."""
    eps = cfg.layer_norm_eps
    ln1 = _sub(params, f"{prefix}.ln1")
    attn = _sub(params, f"{prefix}.attn")
    ln2 = _sub(params, f"{prefix}.ln2")
    ffn = _sub(params, f"{prefix}.ffn")
    a = disentangled_attention(
        T.layer_norm(x, ln1["gamma"], ln1["beta"], eps), attn, rel_table, mask, cfg, rng, training
    )
    x = x + (T.dropout(a, cfg.dropout, rng, training) if training else a)
    f = T.linear(T.gelu(T.linear(T.layer_norm(x, ln2["gamma"], ln2["beta"], eps), ffn["w1"], ffn["b1"])),
                 ffn["w2"], ffn["b2"])
    return x + (T.dropout(f, cfg.dropout, rng, training) if training else f)


def encode(params, ids, mask, cfg, token_table=None, rng=None, training=False):
    """Hidden states (batch, seq, hidden) for integer ``ids`` under ``mask``.

    ``token_table`` overrides ``params['embed.tokens']``; the pre-training
    discriminator passes its composed shared embedding here.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("ids must be (batch, seq)")
    if ids.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id {int(ids.max())} >= vocab_size {cfg.vocab_size}")
    if training and rng is None:
        raise ValueError("training mode needs an rng for dropout")
    table = params["embed.tokens"] if token_table is None else token_table
    eps = cfg.layer_norm_eps
    x = T.embedding(table, ids)
    x = T.layer_norm(x, params["embed.ln.gamma"], params["embed.ln.beta"], eps)
    if training:
        x = T.dropout(x, cfg.dropout, rng, training)
    rel = params["rel.table"]
    for i in range(cfg.num_layers):
        x = transformer_layer(x, params, f"layers.{i}", rel, mask, cfg, rng, training)
    return T.layer_norm(x, params["final_ln.gamma"], params["final_ln.beta"], eps)


def emd_mlm_logits(hidden, params, cfg, mask=None, token_table=None, rng=None, training=False):
    """Vocabulary logits (batch, seq, vocab) after injecting absolute positions."""
    b, length, h = hidden.shape
    x = hidden + params["emd.abs_pos"][:length]
    if cfg.emd_layers:
        mask = np.ones((b, length), dtype=np.int64) if mask is None else mask
        for j in range(cfg.emd_layers):
            x = transformer_layer(x, params, f"emd.layers.{j}", params["rel.table"], mask, cfg, rng, training)
    if cfg.tie_mlm_projection:
        table = params["embed.tokens"] if token_table is None else token_table
        proj = table.transpose(1, 0)
    else:
        proj = params["mlm.proj"]
    return T.linear(x, proj, params["mlm.bias"])
