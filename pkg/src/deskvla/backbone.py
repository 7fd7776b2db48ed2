"""Small trainable transformer encoder producing conditioning features.

Stands in for a large pretrained vision-language backbone: it consumes the
compact visual tokens, the global context token, proprio tokens, and
language tokens (with an attention mask for batch padding) and returns
fused features for the action head. It also owns the toy vocabulary
embedding table shared with the state tokenizer, plus learned absolute
positional embeddings indexed by each token's original position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    attention,
    concat_rows,
    embedding_lookup,
    gather_rows,
    gelu,
    linear,
    rmsnorm,
)

MASKED_SCORE_BIAS = -1e9  # large-but-finite: masked keys underflow to weight 0.0


@dataclass(frozen=True)
class StubConfig:
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    max_seq: int = 160
    vocab_size: int = 1024
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ShapeError("embed_dim must be divisible by heads")


def _linear_init(rng, fan_in, fan_out):
    return Tensor(rng.normal((fan_in, fan_out)) / math.sqrt(fan_in), requires_grad=True)


@dataclass
class EncoderBlock:
    norm1_gain: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm2_gain: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @staticmethod
    def init(cfg, rng):
        d = cfg.embed_dim
        h = d * cfg.mlp_ratio
        return EncoderBlock(
            norm1_gain=Tensor(np.ones(d), requires_grad=True),
            wq=_linear_init(rng, d, d),
            wk=_linear_init(rng, d, d),
            wv=_linear_init(rng, d, d),
            wo=_linear_init(rng, d, d),
            norm2_gain=Tensor(np.ones(d), requires_grad=True),
            mlp_w1=_linear_init(rng, d, h),
            mlp_b1=Tensor(np.zeros(h), requires_grad=True),
            mlp_w2=_linear_init(rng, h, d),
            mlp_b2=Tensor(np.zeros(d), requires_grad=True),
        )

    def named(self, prefix):
        return [
            (f"{prefix}.norm1_gain", self.norm1_gain, False),
            (f"{prefix}.wq", self.wq, True),
            (f"{prefix}.wk", self.wk, True),
            (f"{prefix}.wv", self.wv, True),
            (f"{prefix}.wo", self.wo, True),
            (f"{prefix}.norm2_gain", self.norm2_gain, False),
            (f"{prefix}.mlp_w1", self.mlp_w1, True),
            (f"{prefix}.mlp_b1", self.mlp_b1, False),
            (f"{prefix}.mlp_w2", self.mlp_w2, True),
            (f"{prefix}.mlp_b2", self.mlp_b2, False),
        ]


def masked_attention(q, k, v, heads, key_mask):
    """Multi-head scaled dot-product attention with additive key masking.

    ``key_mask`` is a {0,1} vector over keys; masked keys receive a large
    negative score bias, so after the row-max shift their softmax weight
    underflows to exactly zero and they cannot influence any output.
    """
    bias = None
    if key_mask is not None and not np.all(key_mask == 1):
        bias = np.where(np.asarray(key_mask) == 1, 0.0, MASKED_SCORE_BIAS).reshape(1, -1)
    return attention(q, k, v, heads, key_bias=bias)


@dataclass
class Backbone:
    """Pre-norm encoder stack plus the shared token-embedding tables."""

    config: StubConfig
    token_table: Tensor
    position_table: Tensor
    blocks: list
    final_gain: Tensor

    @staticmethod
    def init(cfg, rng):
        return Backbone(
            config=cfg,
            token_table=Tensor(0.02 * rng.normal((cfg.vocab_size, cfg.embed_dim)), requires_grad=True),
            position_table=Tensor(0.02 * rng.normal((cfg.max_seq, cfg.embed_dim)), requires_grad=True),
            blocks=[EncoderBlock.init(cfg, rng.child("block", i)) for i in range(cfg.layers)],
            final_gain=Tensor(np.ones(cfg.embed_dim), requires_grad=True),
        )

    def named(self, prefix="backbone"):
        out = [
            (f"{prefix}.token_table", self.token_table, True),
            (f"{prefix}.position_table", self.position_table, True),
            (f"{prefix}.final_gain", self.final_gain, False),
        ]
        for i, block in enumerate(self.blocks):
            out.extend(block.named(f"{prefix}.block{i}"))
        return out

    def embed_instruction(self, token_ids, position_offset=0):
        """Embedding rows plus learned positional embeddings for language slots."""
        ids = list(token_ids)
        if any(i < 0 or i >= self.config.vocab_size for i in ids):
            raise ShapeError("instruction id outside the vocabulary")
        if not ids:
            return Tensor(np.zeros((0, self.config.embed_dim)))
        emb = embedding_lookup(self.token_table, ids)
        pos = gather_rows(self.position_table, [position_offset + i for i in range(len(ids))])
        return add(emb, pos)

    def encode(self, sequence, attn_mask=None, positions=None):
        """Run the encoder over one (possibly padded) sequence.

        ``positions`` holds each row's positional-table index, with -1 for
        rows that were already positioned (or padding). Masked positions
        still produce values but cannot influence unmasked outputs.
        """
        n = sequence.shape[0]
        if n > self.config.max_seq:
            raise ShapeError(f"sequence length {n} exceeds max_seq {self.config.max_seq}")
        x = sequence
        if positions is not None:
            positions = np.asarray(positions)
            if np.any(positions >= 0):
                # -1 rows (already positioned, or padding) pick a constant zero row
                augmented = concat_rows(
                    [self.position_table, Tensor(np.zeros((1, self.config.embed_dim)))]
                )
                idx = np.where(positions >= 0, positions, self.config.max_seq)
                x = add(x, gather_rows(augmented, idx))
        for block in self.blocks:
            normed = rmsnorm(x, block.norm1_gain)
            q = linear(normed, block.wq)
            k = linear(normed, block.wk)
            v = linear(normed, block.wv)
            attended = linear(masked_attention(q, k, v, self.config.heads, attn_mask), block.wo)
            x = add(x, attended)
            normed = rmsnorm(x, block.norm2_gain)
            hidden = gelu(linear(normed, block.mlp_w1, block.mlp_b1))
            x = add(x, linear(hidden, block.mlp_w2, block.mlp_b2))
        return rmsnorm(x, self.final_gain)


@dataclass
class ConditioningFeatures:
    """Encoder output plus the mask downstream cross-attention must honor."""

    features: Tensor
    attn_mask: np.ndarray
