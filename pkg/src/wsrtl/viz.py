"""Figure emitters: flow images, inpainting grids and AU-query similarity."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0, 1) * 255).astype(np.uint8)


def flow_to_gray(flow: np.ndarray, max_abs: float | None = None) -> np.ndarray:
    """``H x W x 2`` flow -> ``H x 2W`` uint8 image, u left and v right.

    Zero motion is mid-gray; ``max_abs`` (default: the largest component
    magnitude) maps to black/white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    scale = float(np.abs(flow).max()) if max_abs is None else float(max_abs)
    scale = scale if scale > 0 else 1.0
    u, v = (0.5 + 0.5 * flow[..., i] / scale for i in range(2))
    return _to_uint8(np.concatenate([u, v], axis=1))


def save_flow_image(path: str | Path, flow: np.ndarray, max_abs: float | None = None) -> None:
    Image.fromarray(flow_to_gray(flow, max_abs), mode="L").save(path)


def inpainting_grid(cropped: Sequence[np.ndarray], original: Sequence[np.ndarray],
                    recovered: Sequence[np.ndarray], pad: int = 2) -> np.ndarray:
    """Three rows (cropped, original, recovered) of ``H x W x 3`` images."""
    rows = [cropped, original, recovered]
    if len({len(r) for r in rows}) != 1 or not cropped:
        raise ValueError("every row needs the same, nonzero number of images")
    h, w = np.asarray(cropped[0]).shape[:2]
    k = len(cropped)
    grid = np.ones((3 * h + 4 * pad, k * w + (k + 1) * pad, 3))
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            grid[y:y + h, x:x + w] = img
    return _to_uint8(grid)


def save_inpainting_grid(path: str | Path, cropped, original, recovered) -> None:
    Image.fromarray(inpainting_grid(cropped, original, recovered)).save(path)


def similarity_heatmap(sim: np.ndarray, cell: int = 24) -> np.ndarray:
    """Blue (-1) / white (0) / red (+1) heatmap, one ``cell``-sized square per entry."""
    sim = np.clip(np.asarray(sim, dtype=np.float64), -1, 1)
    pos, neg = np.clip(sim, 0, 1), np.clip(-sim, 0, 1)
    rgb = np.stack([1 - neg, 1 - pos - neg, 1 - pos], axis=-1).clip(0, 1)
    return _to_uint8(np.kron(rgb, np.ones((cell, cell, 1))))


def save_similarity(png_path: str | Path, csv_path: str | Path, sim: np.ndarray, names: Sequence[str]) -> None:
    Image.fromarray(similarity_heatmap(sim)).save(png_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["AU", *names])
        for name, row in zip(names, sim):
            w.writerow([name, *(f"{v:.6f}" for v in row)])


def save_query_bank(csv_path: str | Path, queries: np.ndarray) -> None:
    """One row per AU query, one column per embedding dimension."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(queries):
            w.writerow([f"{v:.8f}" for v in row])
