"""Shared layout of the synthetic task's feature and vocabulary space.

Patch features: [cue dims | row one-hot | col one-hot | cell coords | codes].
Instruction ids name the goal cell's row and column; the first two state
dims hold the effector cell's center coordinates. ``aligned_vocab_rows``
returns embedding-table initializations that align those vocabulary slots
with the matching patch identity dims, standing in for the cross-modal
alignment a pretrained backbone would provide; the rows remain trainable.
"""

from __future__ import annotations

import numpy as np

INSTRUCTION_ID_BASE = 1  # id 0 reserved for padding

# the effector x/y coordinates are stored in shifted per-dim ranges so that
# their binned state tokens never collide with one another
STATE_X_SHIFT = -1.0
STATE_Y_SHIFT = 1.0


MARKER_SCALE = 3.0  # planted-patch marker magnitude in the feature space


def content_dims(config):
    """Feature dims reserved for planted cue values (one per action dim)."""
    return config.action_dim


def goal_marker_dim(config):
    """Dim flagging the goal patch (a vision encoder would light up on the cue)."""
    return content_dims(config)


def effector_marker_dim(config):
    """Dim flagging the effector patch (arm/gripper appearance)."""
    return content_dims(config) + 1


def structured_width(config):
    """Dims carrying episode-invariant or planted structure (cues, markers,
    row/col identity, coordinates)."""
    return content_dims(config) + 2 + 2 * config.grid + 2


def cell_center(index, grid):
    """(x, y) center of a grid cell in [-1, 1]^2."""
    row, col = divmod(int(index), grid)
    x = (col + 0.5) / grid * 2.0 - 1.0
    y = (row + 0.5) / grid * 2.0 - 1.0
    return x, y


def row_onehot_dim(config, row):
    return content_dims(config) + 2 + row


def col_onehot_dim(config, col):
    return content_dims(config) + 2 + config.grid + col


def instruction_for_goal(goal_index, grid):
    row, col = divmod(int(goal_index), grid)
    return [INSTRUCTION_ID_BASE + row, INSTRUCTION_ID_BASE + grid + col]


def goal_from_instruction(ids, grid):
    row = ids[0] - INSTRUCTION_ID_BASE
    col = ids[1] - INSTRUCTION_ID_BASE - grid
    return row * grid + col


def effector_state_values(effector_index, grid):
    """The two state entries that encode the effector cell."""
    x, y = cell_center(effector_index, grid)
    return x + STATE_X_SHIFT, y + STATE_Y_SHIFT


def aligned_vocab_rows(config, spec, scale=1.0):
    """token id -> embedding row aligned with the patch feature space.

    Instruction ids point at the goal marker plus their row/col identity
    dim; the state tokens the effector coordinates bin to point at the
    effector marker plus their identity dim. Stands in for pretrained
    cross-modal alignment; the rows remain trainable. Collisions (two
    meanings binning to one token) merge additively.
    """
    from .tokenizer import bin_index, token_id  # local: avoids import cycle

    g, d = config.grid, config.embed_dim
    rows = {}

    def mark(token, *dims):
        vec = rows.setdefault(token, np.zeros(d))
        for dim in dims:
            vec[dim] += scale

    for r in range(g):
        mark(INSTRUCTION_ID_BASE + r, row_onehot_dim(config, r), goal_marker_dim(config))
    for c in range(g):
        mark(INSTRUCTION_ID_BASE + g + c, col_onehot_dim(config, c), goal_marker_dim(config))
    for cell in range(g):
        x_val, y_val = effector_state_values(cell * g + cell, g)  # diagonal sweep
        mark(token_id(bin_index(x_val, spec), spec),
             col_onehot_dim(config, cell), effector_marker_dim(config))
        mark(token_id(bin_index(y_val, spec), spec),
             row_onehot_dim(config, cell), effector_marker_dim(config))
    return rows
