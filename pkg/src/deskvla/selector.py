"""Guided visual token selection with straight-through gradients.

Each visual token cross-attends to the guidance set (language and/or
proprio embeddings) to form a query, scores every visual token with it,
and casts one vote for its top-scoring candidate after an annealed Gumbel
perturbation. Tokens with at least one vote are kept. The hard keep mask
is combined with the mean soft vote distribution through a straight-through
weight vector, so the forward pass uses the compact gathered sequence while
gradients flow through the soft probabilities. A learned projection of the
mean over all visual tokens is appended as a global context token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    gather_rows,
    gumbel,
    matmul,
    matmul_nt,
    mean_rows,
    mul,
    rmsnorm,
    scale,
    softmax_rows,
    stop_gradient,
    sub,
    transpose,
)

# Softmax temperatures below this overflow double precision on realistic
# score magnitudes; the scheduled anneal endpoint (0.01) stays above it.
SOFT_TEMPERATURE_FLOOR = 1e-4


class SelectorError(ValueError):
    """Shape or argument violates a selector contract."""


@dataclass
class SelectorParams:
    """Learnable pieces: stream norms and the context projection."""

    gain_visual: Tensor
    gain_guidance: Tensor
    gain_query: Tensor
    context_proj: Tensor  # D x D, applied to the mean visual token

    @staticmethod
    def init(embed_dim):
        return SelectorParams(
            gain_visual=Tensor(np.ones(embed_dim), requires_grad=True),
            gain_guidance=Tensor(np.ones(embed_dim), requires_grad=True),
            gain_query=Tensor(np.ones(embed_dim), requires_grad=True),
            context_proj=Tensor(np.eye(embed_dim), requires_grad=True),
        )

    def named(self, prefix="selector"):
        return [
            (f"{prefix}.gain_visual", self.gain_visual, False),
            (f"{prefix}.gain_guidance", self.gain_guidance, False),
            (f"{prefix}.gain_query", self.gain_query, False),
            (f"{prefix}.context_proj", self.context_proj, True),
        ]


@dataclass(frozen=True)
class AnnealSchedule:
    """Cosine decay of the noise temperature over training."""

    alpha_start: float = 1.0
    alpha_end: float = 0.01
    total_steps: int = 5000


@dataclass
class SelectionResult:
    """Everything the rest of the pipeline needs about one selection pass."""

    keep_mask: np.ndarray          # length n_visual, values in {0, 1}
    ste_weights: Tensor            # (n_visual, 1); forward value equals keep_mask
    probs: Tensor                  # (n_visual, 1) mean vote distribution, sums to 1
    kept_indices: np.ndarray       # ascending original indices where mask == 1
    compact: Tensor                # (kept, D) gathered + STE-scaled rows
    attn_mask: np.ndarray          # length kept, all ones (padding is batch-level)
    context: Tensor | None = None  # (1, D) when a context projection is supplied
    vote_counts: np.ndarray = field(default=None)

    @property
    def kept_count(self):
        return int(self.keep_mask.sum())


def make_queries(visual, guidance, params, visual_normed=None):
    """Cross-attend each visual token to the guidance set.

    Rows of the result are convex combinations of the normalized guidance
    rows, weighted by scaled dot-product attention. ``visual_normed`` lets
    the fused selection path reuse an already-normalized visual stream.
    """
    if visual.shape[1] != guidance.shape[1]:
        raise SelectorError("visual and guidance embeddings must share dims")
    if guidance.shape[0] < 1:
        raise SelectorError("at least one guidance token is required")
    d = visual.shape[1]
    v_norm = visual_normed if visual_normed is not None else rmsnorm(visual, params.gain_visual)
    g_norm = rmsnorm(guidance, params.gain_guidance)
    attn = softmax_rows(scale(matmul_nt(v_norm, g_norm), 1.0 / math.sqrt(d)))
    return matmul(attn, g_norm)


def score(queries, visual, params, visual_normed=None):
    """Match normalized queries against normalized visual tokens: (n, n) scores."""
    if queries.shape != visual.shape:
        raise SelectorError("queries and visual tokens must share shape")
    d = visual.shape[1]
    q_norm = rmsnorm(queries, params.gain_query)
    v_norm = visual_normed if visual_normed is not None else rmsnorm(visual, params.gain_visual)
    return scale(matmul_nt(q_norm, v_norm), 1.0 / math.sqrt(d))


def perturb(scores, alpha, rng):
    """Add alpha-scaled i.i.d. Gumbel noise; alpha == 0 returns scores unchanged."""
    if alpha < 0:
        raise SelectorError("noise temperature must be >= 0")
    if alpha == 0.0:
        return scores
    return add(scores, scale(gumbel(scores.shape, rng), alpha))


def vote_mask(noisy_scores):
    """One vote per row for its argmax column; keep every column with a vote.

    Ties break toward the lowest column index. Returns (mask, vote_counts).
    """
    values = noisy_scores.data if isinstance(noisy_scores, Tensor) else np.asarray(noisy_scores)
    winners = values.argmax(axis=1)
    counts = np.bincount(winners, minlength=values.shape[1])
    return (counts > 0).astype(np.int64), counts


def soft_probs(noisy_scores, alpha):
    """Row-wise vote relaxation and its column mean.

    Returns (P, mean_probs) where P = softmax(scores / alpha) per row and
    mean_probs is the (n, 1) column mean, which always sums to 1.
    """
    if alpha <= 0:
        raise SelectorError("soft vote relaxation requires alpha > 0")
    relaxed = softmax_rows(scale(noisy_scores, 1.0 / alpha))
    return relaxed, transpose(mean_rows(relaxed))


def ste_weights(keep_mask, mean_probs):
    """Straight-through weights: hard mask forward, soft-distribution gradient.

    w = mask + probs - stop_gradient(probs); the forward value equals the
    mask exactly and the backward path is identical to the probs path.
    """
    mask_col = Tensor(np.asarray(keep_mask, dtype=np.float64).reshape(-1, 1))
    return add(mask_col, sub(mean_probs, stop_gradient(mean_probs)))


def apply_selection(visual, weights, keep_mask):
    """Gather kept rows in original order and scale by their STE weights.

    Unkept tokens are removed rather than zeroed; forward values of the
    compact rows equal the original rows exactly because kept weights are 1.
    """
    mask = np.asarray(keep_mask)
    kept = np.flatnonzero(mask)
    if kept.size == 0:
        raise SelectorError("selection produced an empty keep set")
    compact = mul(gather_rows(visual, kept), gather_rows(weights, kept))
    return compact, kept, np.ones(kept.size, dtype=np.int64)


def context_token(visual, context_proj):
    """Project the mean of all (pre-selection) visual tokens: (1, D)."""
    return matmul(mean_rows(visual), transpose(context_proj))


def anneal_alpha(step, schedule):
    """Cosine noise-temperature schedule; out-of-range steps clamp to endpoints."""
    s = min(max(step, 0), schedule.total_steps)
    frac = 0.5 * (1.0 + math.cos(math.pi * s / schedule.total_steps))
    return schedule.alpha_end + (schedule.alpha_start - schedule.alpha_end) * frac


def select_tokens(visual, guidance, params, alpha, rng, soft=True):
    """Full selection pass.

    With ``soft`` (training), scores are Gumbel-perturbed at temperature
    ``alpha`` and the straight-through weights carry gradients through the
    mean vote distribution (relaxed at max(alpha, floor)). With
    ``soft=False`` (inference) alpha is ignored, voting is deterministic,
    and the reported distribution is the exact vote-frequency limit.
    """
    n = visual.shape[0]
    v_norm = rmsnorm(visual, params.gain_visual)  # shared by query build and scoring
    if soft:
        queries = make_queries(visual, guidance, params, visual_normed=v_norm)
        noisy = perturb(score(queries, visual, params, visual_normed=v_norm), alpha, rng)
        mask, counts = vote_mask(noisy)
        _, mean_probs = soft_probs(noisy, max(alpha, SOFT_TEMPERATURE_FLOOR))
        weights = ste_weights(mask, mean_probs)
    else:
        queries = make_queries(visual, guidance, params, visual_normed=v_norm)
        scores = score(queries, visual, params, visual_normed=v_norm)
        mask, counts = vote_mask(scores)
        mean_probs = Tensor((counts / n).reshape(-1, 1))
        weights = Tensor(mask.astype(np.float64).reshape(-1, 1))
    compact, kept, attn = apply_selection(visual, weights, mask)
    ctx = context_token(visual, params.context_proj)
    return SelectionResult(
        keep_mask=mask,
        ste_weights=weights,
        probs=mean_probs,
        kept_indices=kept,
        compact=compact,
        attn_mask=attn,
        context=ctx,
        vote_counts=counts,
    )


def pool_tokens(visual, method, k=None, rng=None):
    """Query-free retention baselines: mean, top-k by L2 norm, or random-k.

    Returns (compact, kept_indices); kept indices are ascending so batch
    order stays stable. ``mean`` ignores k and returns a single token.
    """
    n = visual.shape[0]
    if method == "mean":
        return mean_rows(visual), np.array([], dtype=np.intp)
    if k is None or not 1 <= k <= n:
        raise SelectorError(f"k must be in [1, {n}] for {method} pooling")
    if method == "max_topk":
        norms = np.linalg.norm(visual.data, axis=1)
        kept = np.sort(np.argsort(-norms, kind="stable")[:k])
    elif method == "random_k":
        if rng is None:
            raise SelectorError("random_k pooling requires an rng")
        kept = np.sort(rng.choice_without_replacement(n, k))
    else:
        raise SelectorError(f"unknown pooling method {method!r}")
    return gather_rows(visual, kept), kept
