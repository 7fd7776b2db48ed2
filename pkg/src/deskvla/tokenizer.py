"""Proprioceptive state tokenization.

Continuous state values are clipped, uniformly binned, and mapped onto the
tail of a shared vocabulary (reverse order, so bin 0 takes the last slot).
Looking the resulting ids up in the trainable embedding table places robot
state in the same space as language tokens. An MLP encoder variant is kept
for the encoding ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, embedding_lookup, gelu, linear


class InputError(ValueError):
    """Caller-supplied value violates an operation's precondition."""


@dataclass(frozen=True)
class ProprioSpec:
    """Binning layout: p state dims, clip range, bin count, vocab size."""

    dims: int = 15
    clip_min: float = -3.0
    clip_max: float = 3.0
    bins: int = 256
    vocab_size: int = 1024

    def __post_init__(self):
        if self.dims < 1:
            raise InputError("state dimension count must be >= 1")
        if not self.clip_min < self.clip_max:
            raise InputError("clip range must satisfy clip_min < clip_max")
        if self.bins < 2:
            raise InputError("at least two bins are required")
        if self.vocab_size < self.bins:
            raise InputError("vocabulary must contain the last `bins` slots")


@dataclass
class TokenSequence:
    """Ordered embeddings plus modality tag (vision/language/proprio/context)."""

    embeddings: Tensor
    modality: str
    ids: list = field(default_factory=list)

    def __len__(self):
        return self.embeddings.shape[0]


def bin_index(value, spec):
    """Uniform bin of a scalar over the clipped range.

    floor((clip(q) - lo) / (hi - lo) * (bins - 1)); monotone in q, and the
    exact upper edge lands in the last bin without a special case.
    """
    if not math.isfinite(value):
        raise InputError(f"state value must be finite, got {value!r}")
    clipped = min(max(value, spec.clip_min), spec.clip_max)
    frac = (clipped - spec.clip_min) / (spec.clip_max - spec.clip_min)
    return int(math.floor(frac * (spec.bins - 1)))


def token_id(bin_idx, spec):
    """Reverse-map a bin onto the vocabulary tail: id = vocab - 1 - bin."""
    if not 0 <= bin_idx <= spec.bins - 1:
        raise InputError(f"bin {bin_idx} outside [0, {spec.bins - 1}]")
    return spec.vocab_size - 1 - bin_idx


def bin_of_token(tok, spec):
    """Inverse of ``token_id`` (the mapping is a bijection on bins)."""
    b = spec.vocab_size - 1 - tok
    if not 0 <= b <= spec.bins - 1:
        raise InputError(f"token {tok} is not a state token")
    return b


def state_token_ids(state, spec):
    """Per-dimension token ids for a full state vector."""
    values = np.asarray(state, dtype=np.float64).reshape(-1)
    if values.size != spec.dims:
        raise InputError(f"expected {spec.dims} state values, got {values.size}")
    return [token_id(bin_index(v, spec), spec) for v in values]


def tokenize_state(state, table, spec):
    """Embed a state vector as one token per dimension.

    Row k of the result is exactly the table row for dimension k's token id;
    gradient reaches only the looked-up rows.
    """
    if table.shape[0] != spec.vocab_size:
        raise InputError("embedding table row count must equal the vocab size")
    ids = state_token_ids(state, spec)
    return TokenSequence(embedding_lookup(table, ids), "proprio", ids)


@dataclass
class StateMlpParams:
    """Two-layer projector p -> hidden -> D used by the MLP encoding ablation."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def init(state_dim, hidden, embed_dim, rng):
        return StateMlpParams(
            w1=Tensor(rng.normal((state_dim, hidden)) / math.sqrt(state_dim), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(rng.normal((hidden, embed_dim)) / math.sqrt(hidden), requires_grad=True),
            b2=Tensor(np.zeros(embed_dim), requires_grad=True),
        )


def mlp_encode_state(state, params):
    """Project a continuous state into a single token embedding (1 x D)."""
    values = np.asarray(state, dtype=np.float64).reshape(1, -1)
    if values.shape[1] != params.w1.shape[0]:
        raise InputError(
            f"state has {values.shape[1]} dims, encoder expects {params.w1.shape[0]}"
        )
    hidden = gelu(linear(Tensor(values), params.w1, params.b1))
    out = linear(hidden, params.w2, params.b2)
    return TokenSequence(out, "proprio")
