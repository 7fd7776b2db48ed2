"""Held-out evaluation: task error, inference flow loss, kept-token stats."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor
from .episodes import eval_episode_rng, gen_episode, position_codes


def task_error(sampled_chunk, target_chunk):
    """Frobenius distance between a sampled chunk and the planted target."""
    return float(np.linalg.norm(np.asarray(sampled_chunk) - np.asarray(target_chunk)))


def evaluate_policy(policy, config, master, episodes=None):
    """Mean task error over held-out episodes (deterministic selection).

    Also reports the inference-mode flow loss and kept-token statistics so
    ablation rows can compare sequence budgets.
    """
    count = episodes if episodes is not None else config.eval_episodes
    codes = position_codes(config)
    errors = []
    losses = []
    kept = []
    for i in range(count):
        rng = eval_episode_rng(master, i)
        episode = gen_episode(rng.child("gen"), config, codes)
        sampled, forward = policy.sample_episode(episode, rng.child("rollout"))
        errors.append(task_error(sampled, episode.target_chunk))
        losses.append(policy.head.flow_loss(
            Tensor(episode.target_chunk), forward.cond, rng.child("loss"),
            forward.time_extra).item())
        kept.append(forward.kept_count)
    return {
        "episodes": count,
        "task_error": float(np.mean(errors)),
        "task_error_median": float(np.median(errors)),
        "eval_loss": float(np.mean(losses)),
        "kept_mean": float(np.mean(kept)),
        "kept_fraction": float(np.mean(kept) / config.n_visual),
    }
