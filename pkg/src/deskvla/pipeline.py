"""End-to-end policy: state encoding, token retention, backbone, action head.

A Policy owns every trainable component and assembles the conditioning
sequence [compact visual tokens; context token; proprio tokens; language
tokens] according to the configured wiring:

  encoding:  none | tokenized (state -> vocab-tail tokens) |
             mlp_vlm (state -> one continuous backbone token) |
             mlp_act (state -> action-head time-modulation signal)
  retention: dense | selected (guided voting) | mean | max_topk | random_k
  guidance:  language | proprio | joint (selector query source)

Kept visual tokens keep their original positional slots; the context token
(or the mean-pooled token), proprio tokens, and language tokens use
dedicated slots after the visual range. Batch items are padded to the
batch's maximum kept length with zero rows and masked attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .action_head import ActionHead, HeadConfig
from .autodiff import Tensor, concat_rows, mean_all
from .backbone import Backbone, ConditioningFeatures, StubConfig
from .selector import (
    SelectionResult,
    SelectorParams,
    apply_selection,
    context_token,
    pool_tokens,
    select_tokens,
    ste_weights,
)
from .task_layout import aligned_vocab_rows
from .tokenizer import ProprioSpec, StateMlpParams, mlp_encode_state, tokenize_state

POOLED_RETENTIONS = ("mean", "max_topk", "random_k")


@dataclass
class StagedEpisode:
    """Retention result for one episode, before batch-level padding."""

    visual: Tensor
    compact: Tensor
    compact_positions: list
    proprio: Tensor
    language: Tensor
    selection: SelectionResult | None
    time_extra: Tensor | None

    @property
    def kept_count(self):
        return self.compact.shape[0]


@dataclass
class EpisodeForward:
    """One episode's encoder pass plus retention bookkeeping."""

    cond: ConditioningFeatures
    selection: SelectionResult | None
    kept_count: int
    available: int
    time_extra: Tensor | None


class Policy:
    def __init__(self, config, rng):
        self.config = config
        self.spec = ProprioSpec(
            dims=config.proprio_dims,
            clip_min=config.proprio_clip_min,
            clip_max=config.proprio_clip_max,
            bins=config.proprio_bins,
            vocab_size=config.vocab_size,
        )
        self.backbone = Backbone.init(
            StubConfig(
                embed_dim=config.embed_dim,
                layers=config.layers,
                heads=config.heads,
                max_seq=config.max_seq,
                vocab_size=config.vocab_size,
            ),
            rng.child("backbone"),
        )
        self.selector = SelectorParams.init(config.embed_dim)
        self.head = ActionHead.init(
            HeadConfig(
                horizon=config.horizon,
                action_dim=config.action_dim,
                hidden=config.head_hidden,
                layers=config.head_layers,
                heads=config.head_heads,
                cond_dim=config.embed_dim,
                sample_steps=config.sample_steps,
            ),
            rng.child("head"),
        )
        mlp_out = config.head_hidden if config.encoding == "mlp_act" else config.embed_dim
        self.state_mlp = StateMlpParams.init(
            config.proprio_dims, config.state_mlp_hidden, mlp_out, rng.child("state_mlp")
        )
        self._apply_alignment_init()

    def _apply_alignment_init(self):
        """Desk-scale stand-in for pretrained cross-modal alignment.

        The vocabulary rows naming grid rows/columns (and the state tokens
        the effector coordinates bin to) start aligned with the marker and
        identity dims of the patches they refer to. The rows stay trainable.
        """
        for token, vec in aligned_vocab_rows(self.config, self.spec).items():
            self.backbone.token_table.data[token] += vec

    # -- parameters ------------------------------------------------------

    def named_params(self):
        """(name, tensor, weight_decay?) for every component the wiring uses."""
        cfg = self.config
        out = self.backbone.named("backbone") + self.head.named("action_head")
        if cfg.retention == "selected":
            out += self.selector.named("selector")
        elif cfg.use_context:
            out += [("selector.context_proj", self.selector.context_proj, True)]
        if cfg.encoding in ("mlp_vlm", "mlp_act"):
            out += self._state_mlp_named()
        return out

    def all_params(self):
        """Every parameter regardless of wiring (checkpoint surface)."""
        return (
            self.backbone.named("backbone")
            + self.head.named("action_head")
            + self.selector.named("selector")
            + self._state_mlp_named()
        )

    def _state_mlp_named(self):
        return [
            ("state_mlp.w1", self.state_mlp.w1, True),
            ("state_mlp.b1", self.state_mlp.b1, False),
            ("state_mlp.w2", self.state_mlp.w2, True),
            ("state_mlp.b2", self.state_mlp.b2, False),
        ]

    # -- assembly ------------------------------------------------------------

    def _proprio_tokens(self, state):
        cfg = self.config
        if cfg.encoding == "tokenized":
            return tokenize_state(state, self.backbone.token_table, self.spec).embeddings
        if cfg.encoding == "mlp_vlm":
            return mlp_encode_state(state, self.state_mlp).embeddings
        return Tensor(np.zeros((0, cfg.embed_dim)))

    def _guidance(self, language, proprio):
        kind = self.config.guidance
        if kind == "language":
            return language
        if kind == "proprio":
            return proprio
        if proprio.shape[0] == 0:
            return language
        if language.shape[0] == 0:
            return proprio
        return concat_rows([language, proprio])

    def _stage(self, episode, alpha, selector_rng, train):
        """Run encoding + retention for one episode (no padding yet)."""
        cfg = self.config
        visual = Tensor(episode.visual)
        proprio = self._proprio_tokens(episode.state)
        n_proprio = proprio.shape[0]
        language = self.backbone.embed_instruction(
            episode.instruction_ids,
            position_offset=cfg.n_visual + 1 + n_proprio,
        )

        selection = None
        if cfg.retention == "dense":
            compact = visual
            positions = list(range(cfg.n_visual))
        elif cfg.retention == "selected":
            if cfg.force_keep_all:
                selection = self._forced_dense_selection(
                    visual, language, proprio, alpha, selector_rng, train)
            else:
                selection = select_tokens(
                    visual, self._guidance(language, proprio), self.selector,
                    alpha, selector_rng, soft=train,
                )
            compact = selection.compact
            positions = list(selection.kept_indices)
        elif cfg.retention == "mean":
            compact, _ = pool_tokens(visual, "mean")
            positions = [cfg.n_visual]  # context slot; pooled wirings skip ctx
        elif cfg.retention == "max_topk":
            compact, kept = pool_tokens(visual, "max_topk", k=cfg.pool_topk)
            positions = list(kept)
        else:
            compact, kept = pool_tokens(visual, "random_k", k=cfg.pool_random,
                                        rng=selector_rng)
            positions = list(kept)

        time_extra = None
        if cfg.encoding == "mlp_act":
            time_extra = mlp_encode_state(episode.state, self.state_mlp).embeddings

        return StagedEpisode(
            visual=visual,
            compact=compact,
            compact_positions=positions,
            proprio=proprio,
            language=language,
            selection=selection,
            time_extra=time_extra,
        )

    def _encode_staged(self, staged, pad_to=None):
        """Pad the compact block to ``pad_to`` rows, assemble, and encode."""
        cfg = self.config
        kept = staged.kept_count
        pad = 0 if pad_to is None else pad_to - kept
        parts = [staged.compact]
        mask_parts = [np.ones(kept), np.zeros(pad)]
        positions = list(staged.compact_positions) + [-1] * pad
        if pad:
            parts.append(Tensor(np.zeros((pad, cfg.embed_dim))))
        if cfg.use_context:
            parts.append(context_token(staged.visual, self.selector.context_proj))
            mask_parts.append(np.ones(1))
            positions.append(cfg.n_visual)
        n_proprio = staged.proprio.shape[0]
        if n_proprio:
            parts.append(staged.proprio)
            mask_parts.append(np.ones(n_proprio))
            positions.extend(cfg.n_visual + 1 + k for k in range(n_proprio))
        n_language = staged.language.shape[0]
        if n_language:
            parts.append(staged.language)
            mask_parts.append(np.ones(n_language))
            positions.extend([-1] * n_language)  # already positioned
        sequence = concat_rows(parts)
        attn_mask = np.concatenate(mask_parts).astype(np.int64)
        features = self.backbone.encode(sequence, attn_mask, positions)
        return ConditioningFeatures(features, attn_mask)

    def episode_forward(self, episode, alpha=0.0, selector_rng=None, train=False):
        staged = self._stage(episode, alpha, selector_rng, train)
        return EpisodeForward(
            cond=self._encode_staged(staged),
            selection=staged.selection,
            kept_count=staged.kept_count,
            available=self.config.n_visual,
            time_extra=staged.time_extra,
        )

    def _forced_dense_selection(self, visual, language, proprio, alpha, rng, train):
        """Keep-all override: mask forced to ones, soft gradient path intact."""
        mask = np.ones(self.config.n_visual, dtype=np.int64)
        if train and rng is not None:
            base = select_tokens(visual, self._guidance(language, proprio),
                                 self.selector, alpha, rng, soft=True)
            weights = ste_weights(mask, base.probs)
            probs, counts = base.probs, base.vote_counts
        else:
            weights = Tensor(mask.astype(np.float64).reshape(-1, 1))
            probs = Tensor(np.full((self.config.n_visual, 1), 1.0 / self.config.n_visual))
            counts = mask.copy()
        compact, kept, attn = apply_selection(visual, weights, mask)
        return SelectionResult(
            keep_mask=mask, ste_weights=weights, probs=probs, kept_indices=kept,
            compact=compact, attn_mask=attn,
            context=context_token(visual, self.selector.context_proj),
            vote_counts=counts,
        )

    # -- batched training loss ----------------------------------------------

    def batch_loss(self, episodes, alpha, selector_rng, flow_rng):
        """Mean flow-matching loss over a batch, padded to the max kept length."""
        staged = [
            self._stage(ep, alpha,
                        selector_rng.child(i) if selector_rng is not None else None,
                        train=True)
            for i, ep in enumerate(episodes)
        ]
        max_kept = max(st.kept_count for st in staged)
        losses = []
        for i, (episode, st) in enumerate(zip(episodes, staged)):
            cond = self._encode_staged(st, pad_to=max_kept)
            losses.append(self.head.flow_loss(
                Tensor(episode.target_chunk), cond, flow_rng.child(i), st.time_extra))
        loss = mean_all(concat_rows(losses)) if len(losses) > 1 else losses[0]
        kept_counts = [st.kept_count for st in staged]
        stats = {
            "kept_mean": float(np.mean(kept_counts)),
            "kept_min": int(np.min(kept_counts)),
            "kept_max": int(np.max(kept_counts)),
            "available": self.config.n_visual,
        }
        return loss, stats

    # -- inference -----------------------------------------------------------

    def sample_episode(self, episode, rng):
        """Deterministic selection (no noise) followed by few-step sampling."""
        forward = self.episode_forward(episode, alpha=0.0, selector_rng=rng,
                                       train=False)
        chunk = self.head.sample(forward.cond, self.config.sample_steps,
                                 rng.child("flow"), time_extra=forward.time_extra)
        return chunk.data, forward

    def run_selector(self, visual, guidance, alpha=0.0, rng=None, soft=False):
        """Direct selector access for the CLI and diagnostics."""
        return select_tokens(Tensor(np.asarray(visual, dtype=np.float64)),
                             Tensor(np.asarray(guidance, dtype=np.float64)),
                             self.selector, alpha, rng, soft=soft)
