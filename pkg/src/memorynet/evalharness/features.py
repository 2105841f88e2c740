"""Feature-map mosaics of the first stage, before and after the memory read."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from ..data import Image, save_pnm


def normalize_tile(tile: np.ndarray) -> np.ndarray:
    """Per-tile min -> 0, max -> 255 (a constant tile maps to 0)."""
    lo, hi = float(tile.min()), float(tile.max())
    if hi == lo:
        return np.zeros_like(tile)
    return np.round((tile - lo) / (hi - lo) * 255.0)


def mosaic(features: np.ndarray, columns: int | None = None) -> np.ndarray:
    """Lay ``(C, H, W)`` maps out row-major on a grid of ``columns`` tiles; values 0..255."""
    c, h, w = features.shape
    columns = columns or math.ceil(math.sqrt(c))
    rows = math.ceil(c / columns)
    grid = np.zeros((rows * h, columns * w))
    for i in range(c):
        r, q = divmod(i, columns)
        grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = normalize_tile(features[i])
    return grid


def tiles(grid: np.ndarray, count: int, h: int, w: int, columns: int | None = None) -> list[np.ndarray]:
    columns = columns or math.ceil(math.sqrt(count))
    out = []
    for i in range(count):
        r, q = divmod(i, columns)
        out.append(grid[r * h:(r + 1) * h, q * w:(q + 1) * w])
    return out


def first_layer_features(net, img) -> tuple[np.ndarray, np.ndarray]:
    f = net.shallow_features(img, 1)
    e = net.stage_input(f, 1)
    return f.data, e.data


def dump_features(checkpoint, img, out_dir) -> tuple[Path, Path]:
    """Write ``features_pre.pgm`` and ``features_post.pgm`` into ``out_dir``."""
    net = checkpoint.network()
    values = img.values if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    pre, post = first_layer_features(net, values)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = out / "features_pre.pgm", out / "features_post.pgm"
    for feats, path in zip((pre, post), paths):
        save_pnm(Image(mosaic(feats) / 255.0), path)
    return paths
