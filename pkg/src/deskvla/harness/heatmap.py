"""Retention heatmap export: grayscale portable graymap plus a CSV table."""

from __future__ import annotations

import csv
import math
import os

import numpy as np


class HeatmapError(ValueError):
    """Token count does not form a square grid."""


def export_heatmap(selection, grid, out_dir, stem="heatmap"):
    """Write ``<stem>_sel_{kept}of{n}.pgm`` and ``<stem>.csv`` under out_dir.

    The mean vote distribution is reshaped to grid x grid and min-max
    normalized to 8-bit grayscale; a flat distribution maps to mid-gray.
    The CSV lists (row, col, prob, kept) per cell.
    """
    probs = np.asarray(selection.probs.data).reshape(-1)
    mask = np.asarray(selection.keep_mask).reshape(-1)
    n = probs.size
    if grid * grid != n:
        raise HeatmapError(f"{n} tokens do not fill a {grid}x{grid} grid")
    os.makedirs(out_dir, exist_ok=True)

    lo, hi = probs.min(), probs.max()
    if hi - lo < 1e-300:
        pixels = np.full(n, 127, dtype=np.uint8)
    else:
        pixels = np.round((probs - lo) / (hi - lo) * 255.0).astype(np.uint8)

    kept = int(mask.sum())
    pgm_path = os.path.join(out_dir, f"{stem}_sel_{kept}of{n}.pgm")
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{grid} {grid}\n255\n".encode("ascii"))
        fh.write(pixels.reshape(grid, grid).tobytes())

    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "prob", "kept"])
        for idx in range(n):
            row, col = divmod(idx, grid)
            writer.writerow([row, col, f"{probs[idx]:.10g}", int(mask[idx])])
    return pgm_path, csv_path


def read_pgm(path):
    """Parse a binary (P5) graymap back into a uint8 array, for tests."""
    with open(path, "rb") as fh:
        data = fh.read()
    header, _, rest = data.partition(b"255\n")
    fields = header.split()
    if fields[0] != b"P5":
        raise HeatmapError(f"{path}: not a binary graymap")
    width, height = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(rest[: width * height], dtype=np.uint8)
    return pixels.reshape(height, width)
