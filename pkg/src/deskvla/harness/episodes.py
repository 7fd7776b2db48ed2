"""Synthetic desk-scale manipulation episodes.

Each episode plants two special patches in a g x g grid: a goal patch and
an effector patch. The instruction ids name the goal cell's row and
column, and the first two state dims hold the effector cell's (shifted)
center coordinates, so language locates one patch and proprioception the
other. The planted patches carry independently drawn cue values in their
first feature dims, and the target chunk interpolates from the effector
cue to the goal cue, so predicting it requires reading both patches. All
patches carry fixed identity features (one-hot row/col plus coordinates,
the stand-in for a vision encoder's positional content); cue dims of
unplanted patches and everything past the structured dims are i.i.d.
episode noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import Rng
from ..task_layout import (
    MARKER_SCALE,
    STATE_X_SHIFT,
    STATE_Y_SHIFT,
    cell_center,
    content_dims,
    effector_marker_dim,
    effector_state_values,
    goal_from_instruction,
    goal_marker_dim,
    instruction_for_goal,
    structured_width,
)

__all__ = [
    "SyntheticEpisode", "gen_episode", "position_codes", "interpolate_chunk",
    "decode_with_indices", "effector_from_state", "train_episode_rng",
    "eval_episode_rng", "cell_center", "instruction_for_goal",
    "goal_from_instruction", "content_dims", "structured_width",
]


@dataclass
class SyntheticEpisode:
    visual: np.ndarray        # (n_visual, embed_dim)
    instruction_ids: list     # [row id, col id]
    state: np.ndarray         # (proprio_dims,)
    target_chunk: np.ndarray  # (horizon, action_dim)
    goal_index: int
    effector_index: int


def position_codes(config):
    """Fixed per-cell patch features.

    Layout after the cue and marker dims: one-hot row indicator, one-hot
    column indicator, cell center coordinates. Remaining width holds fixed
    random codes. Marker dims are zero here; the generator lights them on
    the planted patches.
    """
    rng = Rng(config.task_seed).child("position_codes")
    g, d = config.grid, config.embed_dim
    cue = content_dims(config)
    if d < structured_width(config):
        raise ValueError("embed_dim too small for the structured patch features")
    codes = np.zeros((g * g, d))
    for j in range(g * g):
        row, col = divmod(j, g)
        codes[j, cue + 2 + row] = 1.0
        codes[j, cue + 2 + g + col] = 1.0
    coords = np.array([cell_center(j, g) for j in range(g * g)])
    codes[:, cue + 2 + 2 * g:cue + 2 + 2 * g + 2] = coords
    feat = structured_width(config)
    if feat < d:
        row_codes = rng.normal((g, d)) / np.sqrt(2.0)
        col_codes = rng.normal((g, d)) / np.sqrt(2.0)
        mixed = (row_codes[:, None, :] + col_codes[None, :, :]).reshape(g * g, d)
        codes[:, feat:] = mixed[:, feat:]
    return codes


def interpolate_chunk(effector_cue, goal_cue, horizon):
    """Straight-line chunk from the effector cue to the goal cue."""
    steps = (np.arange(1, horizon + 1) / horizon)[:, None]
    e = np.asarray(effector_cue, dtype=np.float64)[None, :]
    g = np.asarray(goal_cue, dtype=np.float64)[None, :]
    return e + steps * (g - e)


def gen_episode(rng, config, codes=None):
    """One episode from a dedicated rng stream; same stream, same episode."""
    if codes is None:
        codes = position_codes(config)
    n, g, d = config.n_visual, config.grid, config.embed_dim

    goal_index = int(rng.integers(0, n))
    effector_index = int(rng.integers(0, n - 1))
    if effector_index >= goal_index:
        effector_index += 1  # distinct without rejection sampling

    cue_dims = content_dims(config)
    struct = structured_width(config)
    visual = codes.copy()
    visual[:, :cue_dims] = config.patch_noise * rng.normal((n, cue_dims))
    if struct < d:
        visual[:, struct:] += config.patch_noise * rng.normal((n, d - struct))
    goal_cue = 0.9 * (2.0 * rng.uniform(config.action_dim) - 1.0)
    effector_cue = 0.9 * (2.0 * rng.uniform(config.action_dim) - 1.0)
    visual[goal_index, :cue_dims] = goal_cue
    visual[goal_index, goal_marker_dim(config)] = MARKER_SCALE
    visual[effector_index, :cue_dims] = effector_cue
    visual[effector_index, effector_marker_dim(config)] = MARKER_SCALE

    state = 2.0 * rng.uniform(config.proprio_dims) - 1.0
    state[0], state[1] = effector_state_values(effector_index, g)

    target = interpolate_chunk(effector_cue, goal_cue, config.horizon)
    return SyntheticEpisode(
        visual=visual,
        instruction_ids=instruction_for_goal(goal_index, g),
        state=state,
        target_chunk=target,
        goal_index=goal_index,
        effector_index=effector_index,
    )


def effector_from_state(state, grid):
    """Invert the state layout back to the effector cell index."""
    x = state[0] - STATE_X_SHIFT
    y = state[1] - STATE_Y_SHIFT
    col = int(np.clip(np.floor((x + 1.0) / 2.0 * grid), 0, grid - 1))
    row = int(np.clip(np.floor((y + 1.0) / 2.0 * grid), 0, grid - 1))
    return row * grid + col


def decode_with_indices(episode, goal_index, effector_index, config):
    """Oracle decoder: read both planted cues and rebuild the target chunk."""
    cue_dims = content_dims(config)
    goal_cue = episode.visual[goal_index, :cue_dims]
    effector_cue = episode.visual[effector_index, :cue_dims]
    return interpolate_chunk(effector_cue, goal_cue, config.horizon)


def train_episode_rng(master, index):
    return master.child("episode", "train", index)


def eval_episode_rng(master, index):
    return master.child("episode", "eval", index)
