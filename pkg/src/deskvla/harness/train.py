"""Training loop: annealed selection noise, tri-stage LR, AdamW, EMA."""

from __future__ import annotations

import csv
import json
import math
import os
import time

import numpy as np

from ..autodiff import NumericsError
from ..pipeline import Policy
from ..rng import Rng
from ..selector import AnnealSchedule, anneal_alpha
from ..tensor_io import save_checkpoint
from . import manifest as manifest_mod
from .episodes import gen_episode, position_codes, train_episode_rng
from .evaluate import evaluate_policy
from .optim import AdamW, Ema
from .schedules import TrainSchedule, anneal_lr

METRICS_FIELDS = ["step", "loss", "alpha", "lr", "kept_mean", "kept_min", "kept_max", "wall_ms"]


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; the offending batch is dumped first."""


def run_training(config, seed, out_dir, eval_fn=None):
    """Train a policy from scratch; returns (policy, ema, manifest dict).

    Writes metrics.csv, run_manifest.json, and checkpoint/ under out_dir.
    """
    os.makedirs(out_dir, exist_ok=True)
    master = Rng(seed)
    policy = Policy(config, master.child("init"))
    entries = policy.named_params()
    optimizer = AdamW(
        entries,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        weight_decay=config.weight_decay,
    )
    ema = Ema(entries, config.ema_decay)
    alpha_schedule = AnnealSchedule(config.alpha_start, config.alpha_end,
                                    max(config.train_steps, 1))
    lr_schedule = TrainSchedule(
        total_steps=max(config.train_steps, 1),
        lr=config.lr,
        warmup_frac=config.warmup_frac,
        hold_frac=config.hold_frac,
        decay_frac=config.decay_frac,
        final_lr_factor=config.final_lr_factor,
        ema_decay=config.ema_decay,
        weight_decay=config.weight_decay,
    )

    run = manifest_mod.new_manifest("train", config, seed)
    timer = manifest_mod.StageTimer(run)
    codes = position_codes(config)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    metrics_rows = []

    if config.eval_at_init and config.eval_episodes > 0:
        with timer.time("eval_init"):
            run["metrics"]["init"] = _evaluate(policy, ema, config, master, eval_fn)

    episode_counter = 0
    last_loss = float("nan")
    with timer.time("train"):
        for step in range(config.train_steps):
            step_start = time.perf_counter()
            alpha = anneal_alpha(step, alpha_schedule)
            lr = anneal_lr(step, lr_schedule)
            episodes = []
            for _ in range(config.batch_size):
                episodes.append(gen_episode(
                    train_episode_rng(master, episode_counter), config, codes))
                episode_counter += 1
            try:
                loss, stats = policy.batch_loss(
                    episodes, alpha,
                    master.child("noise", step), master.child("flow", step))
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericsError("non-finite loss")
            except NumericsError as exc:
                _dump_bad_batch(out_dir, step, episode_counter, config, exc)
                raise TrainingAborted(str(exc)) from exc
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            ema.update()
            last_loss = loss_value
            if step % config.log_every == 0:
                metrics_rows.append({
                    "step": step, "loss": loss_value, "alpha": alpha, "lr": lr,
                    "kept_mean": stats["kept_mean"], "kept_min": stats["kept_min"],
                    "kept_max": stats["kept_max"],
                    "wall_ms": (time.perf_counter() - step_start) * 1e3,
                })

    final = {}
    if config.eval_episodes > 0:
        with timer.time("eval_final"):
            final = _evaluate(policy, ema, config, master, eval_fn)
    run["metrics"]["final"] = final
    run["metrics"]["last_train_loss"] = last_loss

    # terminal metrics row pins the schedule endpoints
    metrics_rows.append({
        "step": config.train_steps,
        "loss": last_loss,
        "alpha": anneal_alpha(config.train_steps, alpha_schedule),
        "lr": anneal_lr(config.train_steps, lr_schedule),
        "kept_mean": metrics_rows[-1]["kept_mean"] if metrics_rows else config.n_visual,
        "kept_min": metrics_rows[-1]["kept_min"] if metrics_rows else config.n_visual,
        "kept_max": metrics_rows[-1]["kept_max"] if metrics_rows else config.n_visual,
        "wall_ms": 0.0,
    })
    _write_metrics(metrics_path, metrics_rows)
    run["metrics"]["csv"] = metrics_path

    with timer.time("checkpoint"):
        raw = {name: tensor.data for name, tensor, _ in policy.all_params()}
        shadow = dict(ema.shadow)
        # parameters outside the trained wiring keep their init values in both sets
        ema_full = {name: shadow.get(name, arr.copy()) for name, arr in raw.items()}
        checkpoint_dir = os.path.join(out_dir, "checkpoint")
        save_checkpoint(checkpoint_dir, raw, ema_full,
                        meta={"seed": seed, "config": run["config"],
                              "code_hash": run["code_hash"]})
    run["checkpoint"] = checkpoint_dir
    manifest_path = manifest_mod.write_manifest(
        os.path.join(out_dir, "run_manifest.json"), run)
    run["manifest_path"] = manifest_path
    return policy, ema, run


def _evaluate(policy, ema, config, master, eval_fn):
    ema.swap()
    try:
        result = (eval_fn or evaluate_policy)(policy, config, master)
    finally:
        ema.swap()
    return result


def _write_metrics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def _dump_bad_batch(out_dir, step, episode_counter, config, exc):
    payload = {
        "step": step,
        "episode_counter_end": episode_counter,
        "batch_size": config.batch_size,
        "error": str(exc),
    }
    with open(os.path.join(out_dir, "nan_dump.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
