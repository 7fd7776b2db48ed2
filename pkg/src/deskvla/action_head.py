"""Flow-matching action generator.

Training draws a flow time T ~ Unif(0,1), interpolates the target chunk
toward Gaussian noise, and regresses the velocity field (noise - chunk)
with a small transformer: self-attention over the action tokens,
cross-attention to the conditioning features, and per-block scale/shift
modulation computed from a sinusoidal embedding of T. The modulation MLP's
final layer is zero-initialized, so at init the modulation is exactly the
identity and the output does not depend on T. Sampling Euler-integrates
the learned field from noise (T=1) to an action chunk (T=0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    affine_rows,
    gelu,
    linear,
    mean_all,
    mul,
    rmsnorm,
    scale,
    slice_cols,
    sub,
)
from .backbone import masked_attention


class FlowError(ValueError):
    """Argument violates a flow-matching contract."""


@dataclass(frozen=True)
class HeadConfig:
    horizon: int = 10
    action_dim: int = 2
    hidden: int = 64
    layers: int = 2
    heads: int = 2
    cond_dim: int = 32
    sample_steps: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ShapeError("hidden must be divisible by heads")


def noise_chunk(chunk, t, epsilon):
    """Linear interpolation toward noise: (1 - T) * chunk + T * epsilon."""
    if not 0.0 <= t <= 1.0:
        raise FlowError(f"flow time must lie in [0, 1], got {t}")
    if chunk.shape != epsilon.shape:
        raise FlowError("chunk and noise must share shape")
    return add(scale(chunk, 1.0 - t), scale(epsilon, t))


def target_velocity(chunk, epsilon):
    """Regression target epsilon - chunk; independent of the flow time."""
    if chunk.shape != epsilon.shape:
        raise FlowError("chunk and noise must share shape")
    return sub(epsilon, chunk)


def time_features(t, dim, max_scale=1000.0):
    """Sinusoidal embedding of the scalar flow time (constant w.r.t. the graph)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t * max_scale * freqs
    feats = np.concatenate([np.sin(args), np.cos(args)])
    if feats.size < dim:
        feats = np.concatenate([feats, np.zeros(dim - feats.size)])
    return Tensor(feats.reshape(1, -1))


def _linear_init(rng, fan_in, fan_out):
    return Tensor(rng.normal((fan_in, fan_out)) / math.sqrt(fan_in), requires_grad=True)


@dataclass
class HeadBlock:
    norm1_gain: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm_cross_gain: Tensor
    cq: Tensor
    ck: Tensor
    cv: Tensor
    co: Tensor
    norm2_gain: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    mod_w: Tensor  # zero-init: produces shift/scale deltas for 3 sublayers
    mod_b: Tensor

    @staticmethod
    def init(cfg, rng):
        d = cfg.hidden
        h = d * cfg.mlp_ratio
        # residual output projections start at zero (same principle as the
        # zero-init modulation): each branch only grows as fast as it helps,
        # so early training cannot learn to suppress the conditioning path
        return HeadBlock(
            norm1_gain=Tensor(np.ones(d), requires_grad=True),
            wq=_linear_init(rng, d, d),
            wk=_linear_init(rng, d, d),
            wv=_linear_init(rng, d, d),
            wo=Tensor(np.zeros((d, d)), requires_grad=True),
            norm_cross_gain=Tensor(np.ones(d), requires_grad=True),
            # zero queries start cross-attention uniform (a pooled read of
            # the conditioning), which trains first and sharpens later
            cq=Tensor(np.zeros((d, d)), requires_grad=True),
            ck=_linear_init(rng, cfg.cond_dim, d),
            cv=_linear_init(rng, cfg.cond_dim, d),
            co=Tensor(np.zeros((d, d)), requires_grad=True),
            norm2_gain=Tensor(np.ones(d), requires_grad=True),
            mlp_w1=_linear_init(rng, d, h),
            mlp_b1=Tensor(np.zeros(h), requires_grad=True),
            mlp_w2=Tensor(np.zeros((h, d)), requires_grad=True),
            mlp_b2=Tensor(np.zeros(d), requires_grad=True),
            mod_w=Tensor(np.zeros((d, 6 * d)), requires_grad=True),
            mod_b=Tensor(np.zeros(6 * d), requires_grad=True),
        )

    def named(self, prefix):
        out = []
        for name in (
            "norm1_gain", "wq", "wk", "wv", "wo", "norm_cross_gain",
            "cq", "ck", "cv", "co", "norm2_gain",
            "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mod_w", "mod_b",
        ):
            tensor = getattr(self, name)
            decay = name not in ("norm1_gain", "norm_cross_gain", "norm2_gain",
                                 "mlp_b1", "mlp_b2", "mod_b")
            out.append((f"{prefix}.{name}", tensor, decay))
        return out


def _modulate(x, shift, scale_delta):
    """x * (1 + scale_delta) + shift, broadcast over rows."""
    return affine_rows(x, scale_delta, shift)


@dataclass
class ActionHead:
    config: HeadConfig
    in_proj_w: Tensor
    in_proj_b: Tensor
    action_pos: Tensor
    time_w1: Tensor
    time_b1: Tensor
    time_w2: Tensor
    time_b2: Tensor
    blocks: list
    final_gain: Tensor
    out_w: Tensor
    out_b: Tensor

    @staticmethod
    def init(cfg, rng):
        d = cfg.hidden
        return ActionHead(
            config=cfg,
            in_proj_w=_linear_init(rng, cfg.action_dim, d),
            in_proj_b=Tensor(np.zeros(d), requires_grad=True),
            action_pos=Tensor(0.02 * rng.normal((cfg.horizon, d)), requires_grad=True),
            time_w1=_linear_init(rng, d, d),
            time_b1=Tensor(np.zeros(d), requires_grad=True),
            time_w2=_linear_init(rng, d, d),
            time_b2=Tensor(np.zeros(d), requires_grad=True),
            blocks=[HeadBlock.init(cfg, rng.child("block", i)) for i in range(cfg.layers)],
            final_gain=Tensor(np.ones(d), requires_grad=True),
            out_w=_linear_init(rng, d, cfg.action_dim),
            out_b=Tensor(np.zeros(cfg.action_dim), requires_grad=True),
        )

    def named(self, prefix="action_head"):
        out = [
            (f"{prefix}.in_proj_w", self.in_proj_w, True),
            (f"{prefix}.in_proj_b", self.in_proj_b, False),
            (f"{prefix}.action_pos", self.action_pos, True),
            (f"{prefix}.time_w1", self.time_w1, True),
            (f"{prefix}.time_b1", self.time_b1, False),
            (f"{prefix}.time_w2", self.time_w2, True),
            (f"{prefix}.time_b2", self.time_b2, False),
            (f"{prefix}.final_gain", self.final_gain, False),
            (f"{prefix}.out_w", self.out_w, True),
            (f"{prefix}.out_b", self.out_b, False),
        ]
        for i, block in enumerate(self.blocks):
            out.extend(block.named(f"{prefix}.block{i}"))
        return out

    def _time_embedding(self, t, extra=None):
        feats = time_features(t, self.config.hidden)
        emb = linear(gelu(linear(feats, self.time_w1, self.time_b1)),
                     self.time_w2, self.time_b2)
        if extra is not None:
            emb = add(emb, extra)
        return emb

    def predict_velocity(self, noised, t, cond, time_extra=None):
        """Velocity estimate for a noised chunk at flow time ``t``.

        ``cond`` is a ConditioningFeatures (features + attention mask);
        ``time_extra`` optionally adds a conditioning vector to the time
        embedding (used by the late-modulation state-encoding ablation).
        """
        cfg = self.config
        if noised.shape != (cfg.horizon, cfg.action_dim):
            raise ShapeError(
                f"expected chunk of shape {(cfg.horizon, cfg.action_dim)}, got {noised.shape}"
            )
        if cond.features.shape[1] != cfg.cond_dim:
            raise ShapeError("conditioning feature dim mismatch")
        temb = gelu(self._time_embedding(t, time_extra))
        x = add(linear(noised, self.in_proj_w, self.in_proj_b), self.action_pos)
        d = cfg.hidden
        for block in self.blocks:
            mods = linear(temb, block.mod_w, block.mod_b)
            shift_sa = slice_cols(mods, 0, d)
            scale_sa = slice_cols(mods, d, 2 * d)
            shift_ca = slice_cols(mods, 2 * d, 3 * d)
            scale_ca = slice_cols(mods, 3 * d, 4 * d)
            shift_ml = slice_cols(mods, 4 * d, 5 * d)
            scale_ml = slice_cols(mods, 5 * d, 6 * d)

            normed = _modulate(rmsnorm(x, block.norm1_gain), shift_sa, scale_sa)
            attended = masked_attention(
                linear(normed, block.wq), linear(normed, block.wk),
                linear(normed, block.wv), cfg.heads, key_mask=None,
            )
            x = add(x, linear(attended, block.wo))

            normed = _modulate(rmsnorm(x, block.norm_cross_gain), shift_ca, scale_ca)
            crossed = masked_attention(
                linear(normed, block.cq), linear(cond.features, block.ck),
                linear(cond.features, block.cv), cfg.heads, key_mask=cond.attn_mask,
            )
            x = add(x, linear(crossed, block.co))

            normed = _modulate(rmsnorm(x, block.norm2_gain), shift_ml, scale_ml)
            hidden = gelu(linear(normed, block.mlp_w1, block.mlp_b1))
            x = add(x, linear(hidden, block.mlp_w2, block.mlp_b2))
        return linear(rmsnorm(x, self.final_gain), self.out_w, self.out_b)

    def flow_loss(self, chunk, cond, rng, time_extra=None):
        """Mean squared error between the predicted and target velocity."""
        t = float(rng.uniform())
        epsilon = Tensor(rng.normal(chunk.shape))
        noised = noise_chunk(chunk, t, epsilon)
        predicted = self.predict_velocity(noised, t, cond, time_extra)
        residual = sub(predicted, target_velocity(chunk, epsilon))
        return mean_all(mul(residual, residual))

    def sample(self, cond, steps, rng, time_extra=None, velocity_fn=None):
        """Euler-integrate the velocity field from noise (T=1) down to T=0."""
        if steps < 1:
            raise FlowError("sampling requires at least one step")
        cfg = self.config
        state = Tensor(rng.normal((cfg.horizon, cfg.action_dim)))
        predict = velocity_fn or (lambda x, t: self.predict_velocity(x, t, cond, time_extra))
        dt = 1.0 / steps
        for i in range(steps):
            t = 1.0 - i * dt
            velocity = predict(state, t)
            state = sub(state, scale(velocity, dt))
        return state
