"""Silhouette scoring, embedding export, image grids and score summaries."""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from .pgm import encode_pgm, quantize

SPACE_TAGS = ("vae_latent", "cvae_salient", "cvae_irrelevant")
TILE = 28
GUTTER = 2


def silhouette_samples(points, labels):
    """Per-point silhouette values with Euclidean distances.

    Singleton clusters and points with ``a = b = 0`` score 0.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    labels = np.asarray(labels)
    n = len(points)
    if labels.shape != (n,):
        raise ValueError(f"{len(labels)} labels for {n} points")
    if n < 3:
        raise ValueError("silhouette needs at least 3 points")
    names, codes = np.unique(labels, return_inverse=True)
    k = len(names)
    if k < 2:
        raise ValueError("silhouette needs at least 2 distinct labels")
    codes = codes.astype(np.int64)
    counts = np.bincount(codes, minlength=k)
    sums = kernels.label_distance_sums(points, codes, k)

    scores = np.zeros(n)
    for i in range(n):
        own = codes[i]
        if counts[own] < 2:
            continue
        a = sums[i, own] / (counts[own] - 1)
        b = min(sums[i, c] / counts[c] for c in range(k) if c != own)
        top = max(a, b)
        if top > 0:
            scores[i] = (b - a) / top
    return scores


def silhouette_score(points, labels):
    """Mean silhouette value in [-1, 1]."""
    scores = silhouette_samples(points, labels)
    return math.fsum(scores.tolist()) / len(scores)


@dataclass
class Embedding:
    points: np.ndarray
    labels: np.ndarray
    space_tag: str = "cvae_salient"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.points) != len(self.labels):
            raise ValueError("labels must align with points")
        if self.points.shape[1] < 1:
            raise ValueError("embedding needs at least one dimension")
        if self.space_tag not in SPACE_TAGS:
            raise ValueError(f"space_tag must be one of {SPACE_TAGS}")


def export_embedding(emb, path):
    """CSV with header ``dim_0,...,dim_{k-1},label``; floats printed with 17 significant digits."""
    if len(emb.points) == 0:
        raise ValueError("refusing to export an empty embedding")
    k = emb.points.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# space={emb.space_tag}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"dim_{j}" for j in range(k)] + ["label"])
        for row, label in zip(emb.points, emb.labels):
            writer.writerow([format(v, ".17g") for v in row] + [int(label)])


def read_embedding(path):
    tag = "cvae_salient"
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if lines and lines[0].startswith("#"):
        meta = lines.pop(0)[1:].strip()
        if meta.startswith("space="):
            tag = meta.split("=", 1)[1]
    rows = list(csv.reader(lines))
    if not rows or rows[0][-1] != "label":
        raise ValueError(f"{path}: missing 'dim_*,label' header")
    body = [r for r in rows[1:] if r]
    points = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return Embedding(points.reshape(len(body), len(rows[0]) - 1), labels, tag)


def grid_shape(rows, cols):
    """Pixel (height, width) of a ``rows`` x ``cols`` grid of tiles."""
    return rows * TILE + (rows + 1) * GUTTER, cols * TILE + (cols + 1) * GUTTER


def tile_images(images, rows, cols):
    """Tile 28x28 images row-major onto a white canvas with 2-pixel gutters."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) != rows * cols:
        raise ValueError(f"{len(images)} images do not fill a {rows}x{cols} grid")
    height, width = grid_shape(rows, cols)
    canvas = np.ones((height, width))
    for idx, img in enumerate(images.reshape(-1, TILE, TILE)):
        r, c = divmod(idx, cols)
        top = GUTTER + r * (TILE + GUTTER)
        left = GUTTER + c * (TILE + GUTTER)
        canvas[top : top + TILE, left : left + TILE] = img
    return canvas


def render_image_grid(images, rows, cols, path):
    canvas = tile_images(images, rows, cols)
    with open(path, "wb") as fh:
        fh.write(encode_pgm(quantize(canvas)))
    return canvas.shape


def _quartiles(values):
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return float(q1), float(med), float(q3)


def summarize_scores(scores):
    """``{condition: (n, min, q1, median, q3, max)}`` with linearly interpolated quartiles."""
    by = {}
    for condition, _, value in scores:
        by.setdefault(condition, []).append(float(value))
    out = {}
    for condition, vals in by.items():
        q1, med, q3 = _quartiles(vals)
        out[condition] = (len(vals), min(vals), q1, med, q3, max(vals))
    return out


def boxplot_table(scores, path):
    """Long-format ``condition,trial,score`` rows, then a per-condition summary block."""
    scores = list(scores)
    if not scores:
        raise ValueError("no scores to tabulate")
    summary = summarize_scores(scores)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["condition", "trial", "score"])
        for condition, trial, value in scores:
            writer.writerow([condition, trial, format(float(value), ".17g")])
        fh.write("\n# summary: quartiles by linear interpolation (numpy 'linear', inclusive)\n")
        writer.writerow(["condition", "n", "min", "q1", "median", "q3", "max"])
        for condition, stats in summary.items():
            writer.writerow([condition, stats[0]] + [format(s, ".17g") for s in stats[1:]])
    return summary


def ensure_parent(path):
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
