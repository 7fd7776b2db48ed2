"""Ablation grids: state encoding/entry, retention strategy, guidance source.

Every cell trains from scratch with the same seeds and the same episode
stream (the data stream depends only on the seed, never on the wiring), so
differences in the result table are attributable to the wiring alone.
"""

from __future__ import annotations

import csv
import os
import time

import numpy as np

from .config import ConfigError

# cell name -> config overrides
GRIDS = {
    # incremental build-up from a dense language-only policy
    "components": [
        ("dense_no_state", dict(encoding="none", retention="dense",
                                guidance="language", use_context=False)),
        ("dense_tokenized_state", dict(encoding="tokenized", retention="dense",
                                       guidance="language", use_context=False)),
        ("selected_tokenized_state", dict(encoding="tokenized", retention="selected",
                                          guidance="joint", use_context=False)),
        ("selected_tokenized_state_context", dict(encoding="tokenized",
                                                  retention="selected",
                                                  guidance="joint",
                                                  use_context=True)),
    ],
    # how state is encoded and where it enters
    "encoding": [
        ("state_none", dict(encoding="none", retention="dense",
                            guidance="language", use_context=False)),
        ("state_mlp_to_head", dict(encoding="mlp_act", retention="dense",
                                   guidance="language", use_context=False)),
        ("state_mlp_to_backbone", dict(encoding="mlp_vlm", retention="dense",
                                       guidance="language", use_context=False)),
        ("state_tokenized", dict(encoding="tokenized", retention="dense",
                                 guidance="language", use_context=False)),
    ],
    # pooling baselines vs guided retention
    "retention": [
        ("pool_mean", dict(retention="mean", use_context=False)),
        ("pool_max", dict(retention="max_topk", use_context=False)),
        ("pool_random", dict(retention="random_k", use_context=False)),
        ("guided_language", dict(retention="selected", guidance="language")),
        ("guided_proprio", dict(retention="selected", guidance="proprio")),
        ("guided_joint", dict(retention="selected", guidance="joint")),
    ],
    # guidance-source subset (used by the ordering check)
    "guidance": [
        ("guided_language", dict(retention="selected", guidance="language")),
        ("guided_proprio", dict(retention="selected", guidance="proprio")),
        ("guided_joint", dict(retention="selected", guidance="joint")),
    ],
}

RESULT_FIELDS = ["cell", "seed", "eval_loss", "task_error", "kept_fraction",
                 "train_s", "eval_s", "steps"]


def resolve_cells(grid_name=None, cells=None):
    if grid_name is not None:
        if grid_name not in GRIDS:
            raise ConfigError(
                f"unknown grid {grid_name!r}; options: {sorted(GRIDS)}")
        return GRIDS[grid_name]
    wanted = [c.strip() for c in (cells or "").split(",") if c.strip()]
    if not wanted:
        raise ConfigError("ablate needs --grid or --cells")
    catalog = {name: overrides for grid in GRIDS.values() for name, overrides in grid}
    missing = [c for c in wanted if c not in catalog]
    if missing:
        raise ConfigError(f"unknown ablation cells: {missing}")
    return [(c, catalog[c]) for c in wanted]


def run_grid(config, cells, seeds, out_dir):
    """Train each (cell, seed) pair and collect the comparison table."""
    from .train import run_training  # deferred: keeps import graph flat

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for cell_name, overrides in cells:
        cell_cfg = config.derive(**overrides)
        for seed in seeds:
            t0 = time.perf_counter()
            run_dir = os.path.join(out_dir, f"{cell_name}_seed{seed}")
            _, _, run = run_training(cell_cfg, seed, run_dir)
            final = run["metrics"]["final"]
            rows.append({
                "cell": cell_name,
                "seed": seed,
                "eval_loss": final["eval_loss"],
                "task_error": final["task_error"],
                "kept_fraction": final["kept_fraction"],
                "train_s": run["stages"].get("train", 0.0),
                "eval_s": run["stages"].get("eval_final", 0.0),
                "steps": cell_cfg.train_steps,
            })
            _write_rows(os.path.join(out_dir, "ablation.csv"), rows)
    return rows


def _write_rows(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def median_errors_by_cell(rows):
    by_cell = {}
    for row in rows:
        by_cell.setdefault(row["cell"], []).append(row["task_error"])
    return {cell: float(np.median(errs)) for cell, errs in by_cell.items()}


def check_guidance_ordering(rows):
    """Joint guidance must beat both single-source cells (median task error)."""
    medians = median_errors_by_cell(rows)
    needed = {"guided_language", "guided_proprio", "guided_joint"}
    if not needed.issubset(medians):
        raise ConfigError("ordering check needs the three guided cells")
    joint = medians["guided_joint"]
    ok = joint < medians["guided_language"] and joint < medians["guided_proprio"]
    return ok, medians
