"""Command-line harness.

Subcommands: tokenize, select, train, eval, ablate, bench, heatmap.
Global flags: --config <path>, --seed <u64>, --out <dir>.
Exit codes: 0 success, 1 usage error, 2 numerical failure,
3 failed --check assertion.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from ..autodiff import NumericsError, Tensor, concat_rows
from ..pipeline import Policy
from ..rng import Rng
from ..tensor_io import TensorFileError, load_checkpoint, read_tensor, write_tensor
from ..tokenizer import InputError, ProprioSpec, bin_index, token_id
from . import ablate as ablate_mod
from . import bench as bench_mod
from .config import Config, ConfigError, load_config
from .episodes import gen_episode, eval_episode_rng, position_codes
from .evaluate import evaluate_policy
from .heatmap import export_heatmap
from .manifest import new_manifest, write_manifest
from .train import TrainingAborted, run_training


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


_GLOBAL_DEFAULTS = {"config": None, "seed": 0, "out": "runs"}


def build_parser():
    # global flags live on a shared parent so they work before or after the
    # subcommand; SUPPRESS keeps the subparser from clobbering a root value
    common = _Parser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="key=value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output directory (default: runs)")

    parser = _Parser(prog="deskvla", description=__doc__,
                     parents=[common], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name, help_text):
        return sub.add_parser(name, help=help_text, parents=[common],
                              allow_abbrev=False)

    p = add_command("tokenize", "bin a CSV of states into token ids")
    p.add_argument("--input", required=True, help="CSV, one state per row")
    p.add_argument("--output", default=None, help="defaults to <out>/tokens.csv")

    p = add_command("select", "run token selection and export results")
    p.add_argument("--visual", default=None, help="tensor file with visual tokens")
    p.add_argument("--guidance", default=None, help="tensor file with guidance tokens")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--episode-index", type=int, default=0,
                   help="synthesized episode when no tensor files are given")

    add_command("train", "train a policy on the synthetic task")

    p = add_command("eval", "evaluate a checkpoint on held-out episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--raw-params", action="store_true",
                   help="use raw instead of EMA parameters")

    p = add_command("ablate", "train and compare wiring variants")
    p.add_argument("--grid", default=None, choices=sorted(ablate_mod.GRIDS))
    p.add_argument("--cells", default=None, help="comma-separated cell names")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--check", action="store_true",
                   help="assert joint guidance beats single-source guidance")

    p = add_command("bench", "latency benchmark, dense vs selected")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--check", action="store_true",
                   help="assert the speedup/scaling ratios")

    p = add_command("heatmap", "render a selection CSV as a graymap")
    p.add_argument("--from-csv", required=True, dest="from_csv")
    p.add_argument("--grid-size", type=int, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for key, value in _GLOBAL_DEFAULTS.items():
            if not hasattr(args, key):
                setattr(args, key, value)
        config = load_config(args.config)
        handler = {
            "tokenize": _cmd_tokenize,
            "select": _cmd_select,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "ablate": _cmd_ablate,
            "bench": _cmd_bench,
            "heatmap": _cmd_heatmap,
        }[args.command]
        return handler(args, config)
    except (UsageError, ConfigError, InputError, TensorFileError,
            FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericsError, TrainingAborted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except bench_mod.CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 3


def _cmd_tokenize(args, config):
    spec = ProprioSpec(
        dims=config.proprio_dims,
        clip_min=config.proprio_clip_min,
        clip_max=config.proprio_clip_max,
        bins=config.proprio_bins,
        vocab_size=config.vocab_size,
    )
    out_path = args.output or os.path.join(args.out, "tokens.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    with open(args.input, newline="", encoding="utf-8") as src, \
            open(out_path, "w", newline="", encoding="utf-8") as dst:
        writer = csv.writer(dst)
        writer.writerow(["timestep", "dim", "bin", "token_id"])
        for t, row in enumerate(csv.reader(src)):
            values = [float(v) for v in row if v.strip() != ""]
            if len(values) != spec.dims:
                raise InputError(
                    f"row {t}: expected {spec.dims} values, got {len(values)}")
            for dim, value in enumerate(values):
                b = bin_index(value, spec)
                writer.writerow([t, dim, b, token_id(b, spec)])
    print(f"wrote {out_path}")
    return 0


def _policy_from_checkpoint(checkpoint_dir, use_ema=True, config_override=None):
    raw, ema, meta = load_checkpoint(checkpoint_dir)
    config = config_override or Config(**meta["config"]).validate()
    policy = Policy(config, Rng(int(meta.get("seed", 0))).child("init"))
    source = ema if (use_ema and ema) else raw
    for name, tensor, _ in policy.all_params():
        if name in source:
            if source[name].shape != tensor.data.shape:
                raise TensorFileError(f"{name}: checkpoint shape mismatch")
            tensor.data = source[name].copy()
    return policy, config


def _cmd_select(args, config):
    os.makedirs(args.out, exist_ok=True)
    rng = Rng(args.seed)
    if args.checkpoint:
        policy, config = _policy_from_checkpoint(args.checkpoint)
    else:
        policy = Policy(config, rng.child("init"))

    if args.visual or args.guidance:
        if not (args.visual and args.guidance):
            raise UsageError("--visual and --guidance must be given together")
        visual = read_tensor(args.visual)
        guidance = read_tensor(args.guidance)
    else:
        codes = position_codes(config)
        episode = gen_episode(
            eval_episode_rng(rng, args.episode_index).child("gen"), config, codes)
        visual = episode.visual
        staged = policy._stage(episode, 0.0, None, train=False)
        guidance = policy._guidance(staged.language, staged.proprio).data

    soft = args.alpha > 0.0
    result = policy.run_selector(visual, guidance, alpha=args.alpha,
                                 rng=rng.child("noise"), soft=soft)
    n = result.keep_mask.size
    grid = int(round(math.sqrt(n)))
    if grid * grid != n:
        raise UsageError(f"{n} visual tokens do not form a square grid")
    pgm, csv_path = export_heatmap(result, grid, args.out, stem="selection")
    with open(os.path.join(args.out, "kept_indices.txt"), "w", encoding="utf-8") as fh:
        fh.write(",".join(str(int(i)) for i in result.kept_indices) + "\n")
    print(f"kept {result.kept_count}/{n}; wrote {pgm} and {csv_path}")
    return 0


def _cmd_train(args, config):
    out_dir = os.path.join(args.out, f"train_seed{args.seed}")
    _, _, run = run_training(config, args.seed, out_dir)
    final = run["metrics"].get("final", {})
    print(json.dumps({"out": out_dir,
                      "task_error": final.get("task_error"),
                      "kept_fraction": final.get("kept_fraction")}, indent=2))
    return 0


def _cmd_eval(args, config):
    policy, config = _policy_from_checkpoint(args.checkpoint,
                                             use_ema=not args.raw_params)
    master = Rng(args.seed)
    result = evaluate_policy(policy, config, master, episodes=args.episodes)
    run = new_manifest("eval", config, args.seed)
    run["metrics"]["eval"] = result
    os.makedirs(args.out, exist_ok=True)
    write_manifest(os.path.join(args.out, "eval_manifest.json"), run)
    print(json.dumps(result, indent=2))
    return 0


def _cmd_ablate(args, config):
    cells = ablate_mod.resolve_cells(args.grid, args.cells)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out_dir = os.path.join(args.out, f"ablate_{args.grid or 'cells'}")
    rows = ablate_mod.run_grid(config, cells, seeds, out_dir)
    medians = ablate_mod.median_errors_by_cell(rows)
    print(json.dumps({"cells": medians, "csv": os.path.join(out_dir, "ablation.csv")},
                     indent=2))
    if args.check:
        ok, medians = ablate_mod.check_guidance_ordering(rows)
        if not ok:
            raise bench_mod.CheckFailure(
                f"joint guidance did not rank best: {medians}")
    return 0


def _cmd_bench(args, config):
    report = bench_mod.run_bench(config, args.seed, steps=args.steps,
                                 warmup=args.warmup, check=args.check,
                                 out_dir=args.out)
    run = new_manifest("bench", config, args.seed)
    run["metrics"]["bench"] = report
    os.makedirs(args.out, exist_ok=True)
    write_manifest(os.path.join(args.out, "bench_manifest.json"), run)
    print(json.dumps(report["ratios"], indent=2))
    return 0


def _cmd_heatmap(args, config):
    rows = list(csv.DictReader(open(args.from_csv, newline="", encoding="utf-8")))
    probs = np.array([float(r["prob"]) for r in rows])
    mask = np.array([int(r["kept"]) for r in rows])
    n = probs.size
    grid = args.grid_size or int(round(math.sqrt(n)))
    if grid * grid != n:
        raise UsageError(f"{n} cells do not form a {grid}x{grid} grid")

    class _View:  # minimal SelectionResult view for the exporter
        pass

    view = _View()
    view.probs = Tensor(probs.reshape(-1, 1))
    view.keep_mask = mask
    pgm, csv_path = export_heatmap(view, grid, args.out, stem="heatmap")
    print(f"wrote {pgm} and {csv_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
