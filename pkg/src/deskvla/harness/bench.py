"""Inference latency benchmark.

Times each pipeline stage (synthetic token generation standing in for a
vision encoder, the selector, the backbone encoder, and the few-step
action sampler) over many steps after a warmup, for both the dense and the
retention-forced selected path. Also measures how selector time scales
when the visual token count doubles: the dominant cost is quadratic in
token count at fixed width, so doubling should roughly quadruple it.

Measurement discipline: one BLAS worker (pinned), graph recording and
finite guards off, large allocations kept on the heap (no mmap churn), and
the scaling probe times a fused single-kernel transcription of the
selector forward (asserted equivalent to the op-graph path in the test
suite) in fixed-size batches, taking the best batch mean. Absolute
milliseconds are machine-dependent; the assertable outputs are ratios.
"""

from __future__ import annotations

import csv
import ctypes
import math
import os
import time

import numpy as np
from threadpoolctl import threadpool_limits

from ..autodiff import (
    RMSNORM_EPS,
    Tensor,
    concat_rows,
    gumbel_from_uniform,
    no_grad,
    set_finite_checks,
)
from ..pipeline import Policy
from ..rng import Rng
from ..selector import SOFT_TEMPERATURE_FLOOR, SelectorParams, select_tokens
from .episodes import gen_episode, position_codes


class CheckFailure(AssertionError):
    """A --check assertion about the latency structure failed."""


def _pin_allocator():
    """Keep big blocks on the heap so per-call mmap/munmap churn cannot skew timings."""
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 26)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 26)  # M_TRIM_THRESHOLD
    except OSError:
        pass


def _now_ms():
    return time.perf_counter_ns() / 1e6


def _summary(samples):
    arr = np.asarray(samples)
    return {"mean": float(arr.mean()), "p95": float(np.percentile(arr, 95))}


def forced_keep_set(selection, k):
    """Exactly k token indices: vote-count ranking, index ascending on ties."""
    counts = selection.vote_counts
    order = np.lexsort((np.arange(counts.size), -counts))
    return np.sort(order[:k])


def fused_selector_forward(visual, guidance, params, alpha, rng):
    """Raw-array transcription of the training-mode selector forward.

    Produces exactly the keep mask, vote counts, and mean vote distribution
    of the op-graph path; used only as the scaling-probe timing kernel.
    """
    d = visual.shape[1]

    def rms(x, gain):
        sumsq = np.einsum("ij,ij->i", x, x) / x.shape[1]
        return x / np.sqrt(sumsq + RMSNORM_EPS).reshape(-1, 1) * gain

    v_norm = rms(visual, params.gain_visual.data)
    g_norm = rms(guidance, params.gain_guidance.data)
    logits = (v_norm @ g_norm.T) / math.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=1, keepdims=True)
    queries = attn @ g_norm
    scores = (rms(queries, params.gain_query.data) @ v_norm.T) / math.sqrt(d)
    noisy = scores + alpha * gumbel_from_uniform(rng.uniform(scores.shape))
    winners = noisy.argmax(axis=1)
    counts = np.bincount(winners, minlength=noisy.shape[1])
    mask = (counts > 0).astype(np.int64)
    relaxed = noisy / max(alpha, SOFT_TEMPERATURE_FLOOR)
    relaxed -= relaxed.max(axis=1, keepdims=True)
    np.exp(relaxed, out=relaxed)
    relaxed /= relaxed.sum(axis=1, keepdims=True)
    return mask, counts, relaxed.mean(axis=0)


def _batch_time(fn, calls=60, batches=9, warmup=15):
    """Best batch-mean in ms per call (robust to scheduler interference)."""
    for _ in range(warmup):
        fn()
    per = []
    for _ in range(batches):
        t0 = time.perf_counter_ns()
        for _ in range(calls):
            fn()
        per.append((time.perf_counter_ns() - t0) / 1e6 / calls)
    return min(per)


def run_bench(config, seed, steps=None, warmup=None, check=False, out_dir=None):
    steps = steps if steps is not None else config.bench_steps
    warmup = warmup if warmup is not None else config.bench_warmup
    bench_cfg = config.derive(
        embed_dim=config.bench_embed_dim,
        grid=config.bench_grid,
        max_seq=max(config.max_seq,
                    config.bench_grid**2 + config.proprio_dims + 16),
        retention="selected",
        encoding="tokenized",
        guidance="joint",
        use_context=True,
        force_keep_all=False,
    )
    master = Rng(seed)
    policy = Policy(bench_cfg, master.child("init"))
    codes = position_codes(bench_cfg)
    n_visual = bench_cfg.n_visual
    k_forced = max(1, round(config.bench_retention * n_visual))

    stage_names = ["vision", "selector", "backbone_selected", "backbone_dense",
                   "action_selected", "action_dense"]
    samples = {name: [] for name in stage_names}
    kept_counts = []

    _pin_allocator()
    previous_checks = set_finite_checks(False)
    try:
        with threadpool_limits(limits=1), no_grad():
            for step in range(warmup + steps):
                record = step >= warmup
                rng = master.child("bench", step)

                t0 = _now_ms()
                episode = gen_episode(rng.child("gen"), bench_cfg, codes)
                t1 = _now_ms()

                visual = Tensor(episode.visual)
                proprio = policy._proprio_tokens(episode.state)
                language = policy.backbone.embed_instruction(
                    episode.instruction_ids,
                    position_offset=n_visual + 1 + proprio.shape[0])
                guidance = concat_rows([language, proprio])

                t2 = _now_ms()
                selection = select_tokens(visual, guidance, policy.selector,
                                          alpha=0.0, rng=None, soft=False)
                kept = forced_keep_set(selection, k_forced)
                t3 = _now_ms()

                cond_sel = _encode(policy, visual, kept, proprio, language)
                t4 = _now_ms()
                cond_dense = _encode(policy, visual, np.arange(n_visual),
                                     proprio, language)
                t5 = _now_ms()
                policy.head.sample(cond_sel, bench_cfg.sample_steps, rng.child("a"))
                t6 = _now_ms()
                policy.head.sample(cond_dense, bench_cfg.sample_steps, rng.child("b"))
                t7 = _now_ms()

                if record:
                    samples["vision"].append(t1 - t0)
                    samples["selector"].append(t3 - t2)
                    samples["backbone_selected"].append(t4 - t3)
                    samples["backbone_dense"].append(t5 - t4)
                    samples["action_selected"].append(t6 - t5)
                    samples["action_dense"].append(t7 - t6)
                    kept_counts.append(kept.size)

            scaling = _selector_scaling(bench_cfg, master.child("scaling"))
    finally:
        set_finite_checks(previous_checks)

    stages = {name: _summary(vals) for name, vals in samples.items()}
    e2e_selected = (np.asarray(samples["vision"]) + np.asarray(samples["selector"])
                    + np.asarray(samples["backbone_selected"])
                    + np.asarray(samples["action_selected"]))
    e2e_dense = (np.asarray(samples["vision"]) + np.asarray(samples["backbone_dense"])
                 + np.asarray(samples["action_dense"]))
    report = {
        "steps": steps,
        "warmup": warmup,
        "embed_dim": bench_cfg.embed_dim,
        "kept": int(np.mean(kept_counts)),
        "available": n_visual,
        "stages_ms": stages,
        "e2e_ms": {"selected": _summary(e2e_selected), "dense": _summary(e2e_dense)},
        "ratios": {
            "backbone_speedup": stages["backbone_dense"]["mean"]
            / stages["backbone_selected"]["mean"],
            "e2e_speedup": float(e2e_dense.mean() / e2e_selected.mean()),
            "selector_scaling_ratio": scaling["ratio"],
        },
        "selector_scaling": scaling,
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "bench_stages.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "mean_ms", "p95_ms"])
            for name in stage_names:
                writer.writerow([name, f"{stages[name]['mean']:.6f}",
                                 f"{stages[name]['p95']:.6f}"])
    if check:
        _check_report(report)
    return report


def _encode(policy, visual, kept, proprio, language):
    """Assemble and encode one sequence for a fixed keep set (bench path)."""
    from ..autodiff import gather_rows
    from ..backbone import ConditioningFeatures
    from ..selector import context_token

    cfg = policy.config
    compact = visual if kept.size == cfg.n_visual else gather_rows(visual, kept)
    parts = [compact, context_token(visual, policy.selector.context_proj)]
    positions = list(kept) + [cfg.n_visual]
    n_proprio = proprio.shape[0]
    if n_proprio:
        parts.append(proprio)
        positions.extend(cfg.n_visual + 1 + i for i in range(n_proprio))
    if language.shape[0]:
        parts.append(language)
        positions.extend([-1] * language.shape[0])
    sequence = concat_rows(parts)
    mask = np.ones(sequence.shape[0], dtype=np.int64)
    return ConditioningFeatures(policy.backbone.encode(sequence, mask, positions), mask)


def _selector_scaling(config, rng, sizes=(128, 256), alpha=0.35, guidance_count=17,
                      repeats=3):
    """Fused-kernel selector time at each token count; quadratic => ~4x.

    The two-size measurement is repeated and the median ratio reported,
    since sub-millisecond kernels are sensitive to scheduler interference.
    """
    d = config.embed_dim
    params = SelectorParams.init(d)
    ratios = []
    per_size = {n: [] for n in sizes}
    for rep in range(repeats):
        times = {}
        for n in sizes:
            visual = rng.child("v", n, rep).normal((n, d))
            guidance = rng.child("q", n, rep).normal((guidance_count, d))
            noise = rng.child("n", n, rep)
            times[n] = _batch_time(
                lambda: fused_selector_forward(visual, guidance, params, alpha, noise))
            per_size[n].append(times[n])
        ratios.append(times[sizes[1]] / times[sizes[0]])
    lo, hi = sizes
    return {"sizes": list(sizes),
            "ms_per_call": [float(np.median(per_size[lo])),
                            float(np.median(per_size[hi]))],
            "ratio": float(np.median(ratios)),
            "ratios": ratios}


# doubling the token count should ~quadruple selector time, within +-50%
SCALING_WINDOW = (2.0, 6.0)


def _check_report(report):
    ratios = report["ratios"]
    if ratios["backbone_speedup"] < 2.0:
        raise CheckFailure(
            f"backbone speedup {ratios['backbone_speedup']:.2f} < 2.0")
    if ratios["e2e_speedup"] < 1.5:
        raise CheckFailure(f"end-to-end speedup {ratios['e2e_speedup']:.2f} < 1.5")
    lo, hi = SCALING_WINDOW
    if not lo <= ratios["selector_scaling_ratio"] <= hi:
        raise CheckFailure(
            f"selector scaling ratio {ratios['selector_scaling_ratio']:.2f} "
            f"outside [{lo}, {hi}]")

