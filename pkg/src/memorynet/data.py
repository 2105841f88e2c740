"""Synthetic paired degradations, binary netpbm I/O and batch iteration.

Images are ``(C, H, W)`` float64 arrays in [0, 1] with C in {1, 3}.
On disk a dataset is a directory of ``<id>_in.ppm`` (degraded),
``<id>_gt.ppm`` (clean) and optional ``<id>_mask.pgm`` files.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, GenerationError, ParseError, UsageError


@dataclass
class Image:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[0] not in (1, 3):
            raise UsageError(f"an image is (1|3, H, W), got shape {v.shape}")
        self.values = np.clip(v, 0.0, 1.0)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class SamplePair:
    degraded: Image
    clean: Image
    mask: Image | None = None
    name: str = ""

    def __post_init__(self):
        extents = {self.degraded.shape[1:], self.clean.shape[1:]}
        if self.mask is not None:
            extents.add(self.mask.shape[1:])
            if not np.all(np.isin(self.mask.values, (0.0, 1.0))):
                raise UsageError("mask values must be 0 or 1")
        if len(extents) != 1:
            raise UsageError(f"pair members have different extents: {sorted(extents)}")


# ---------------------------------------------------------------------------
# clean scenes


def synth_clean(size: int, seed: int) -> Image:
    """A smooth colour gradient with a few flat-coloured rectangles and discs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, base = rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.35, 0.75)
        img[c] = base + a * (xx - 0.5) + b * (yy - 0.5)
    for _ in range(rng.integers(3, 7)):
        colour = rng.uniform(0.1, 0.95, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.08, 0.3, size=2)
        if rng.random() < 0.5:
            region = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        img[:, region] = colour[:, None]
    img += rng.normal(0.0, 0.01, size=img.shape)
    return Image(img)


# ---------------------------------------------------------------------------
# shadow


def _pixel_centres(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w]
    return xx + 0.5, yy + 0.5


def points_in_polygon(px: np.ndarray, py: np.ndarray, polygon: Sequence[Sequence[float]]) -> np.ndarray:
    """Even-odd crossing test; vertices are ``(x, y)`` in pixel units."""
    poly = np.asarray(polygon, dtype=np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        crosses = (y1 > py) != (y0 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = x1 + (py - y1) * (x0 - x1) / (y0 - y1)
        inside ^= crosses & (px < xcross)
        x0, y0 = x1, y1
    return inside


def _distance_to_boundary(px, py, polygon) -> np.ndarray:
    poly = np.asarray(polygon, dtype=np.float64)
    best = np.full(px.shape, np.inf)
    for (x0, y0), (x1, y1) in zip(poly, np.roll(poly, -1, axis=0)):
        dx, dy = x1 - x0, y1 - y0
        length2 = dx * dx + dy * dy
        t = np.clip(((px - x0) * dx + (py - y0) * dy) / length2, 0.0, 1.0) if length2 else 0.0
        best = np.minimum(best, np.hypot(px - (x0 + t * dx), py - (y0 + t * dy)))
    return best


def polygon_area(polygon) -> float:
    poly = np.asarray(polygon, dtype=np.float64)
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def synth_shadow(
    clean: Image,
    polygon,
    attenuation: float,
    seed: int = 0,
    penumbra: float = 2.0,
) -> SamplePair:
    """Darken the inside of ``polygon`` multiplicatively.

    Inside pixels farther than ``penumbra`` pixels from the boundary are
    scaled by ``attenuation``; closer ones ramp linearly towards 1 at the
    boundary.  Outside pixels are untouched.  ``seed`` is accepted for a
    uniform generator signature; the result does not depend on it.
    """
    poly = np.asarray(polygon, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
        raise GenerationError("polygon needs at least 3 (x, y) vertices")
    if not 0.0 < attenuation <= 1.0:
        raise GenerationError(f"attenuation must be in (0, 1], got {attenuation}")
    h, w = clean.height, clean.width
    if np.any(poly < 0) or np.any(poly[:, 0] > w) or np.any(poly[:, 1] > h):
        raise GenerationError("polygon vertices must lie inside the image")
    if polygon_area(poly) <= 1e-9:
        raise GenerationError("polygon has zero area")
    px, py = _pixel_centres(h, w)
    mask = points_in_polygon(px, py, poly)
    factor = np.ones((h, w))
    if penumbra > 0:
        ramp = np.clip(_distance_to_boundary(px, py, poly) / penumbra, 0.0, 1.0)
        factor[mask] = 1.0 - (1.0 - attenuation) * ramp[mask]
    else:
        factor[mask] = attenuation
    degraded = clean.values * factor[None]
    return SamplePair(Image(degraded), Image(clean.values.copy()), Image(mask.astype(np.float64)))


def random_polygon(rng: np.random.Generator, size: int, vertices: int | None = None) -> np.ndarray:
    """A star-shaped polygon around a random centre, clipped to the image."""
    n = int(vertices or rng.integers(3, 7))
    centre = rng.uniform(0.3 * size, 0.7 * size, size=2)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(0.15 * size, 0.4 * size, size=n)
    pts = centre + np.stack([np.cos(angles), np.sin(angles)], axis=1) * radii[:, None]
    return np.clip(pts, 0.0, float(size))


# ---------------------------------------------------------------------------
# rain


def synth_rain(
    clean: Image,
    streak_count: int,
    angle: float,
    intensity: float,
    seed: int,
    length: tuple[int, int] = (4, 12),
) -> SamplePair:
    """Add bright straight streaks at ``angle`` degrees from vertical."""
    if not 0.0 < intensity <= 1.0:
        raise GenerationError(f"intensity must be in (0, 1], got {intensity}")
    if streak_count < 0:
        raise GenerationError("streak_count must be >= 0")
    rng = np.random.default_rng(seed)
    h, w = clean.height, clean.width
    mask = np.zeros((h, w), dtype=bool)
    theta = np.deg2rad(angle)
    direction = np.array([np.sin(theta), np.cos(theta)])
    for _ in range(streak_count):
        start = rng.uniform((0, 0), (w, h))
        n = int(rng.integers(length[0], length[1] + 1))
        steps = np.linspace(0.0, n, 2 * n + 1)
        pts = start[None] + steps[:, None] * direction[None]
        xs = np.floor(pts[:, 0]).astype(int)
        ys = np.floor(pts[:, 1]).astype(int)
        keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        mask[ys[keep], xs[keep]] = True
    degraded = clean.values + intensity * mask[None]
    return SamplePair(Image(degraded), Image(clean.values.copy()), Image(mask.astype(np.float64)))


# ---------------------------------------------------------------------------
# blur


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigurationError(f"kernel_size must be odd, got {kernel_size}")
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be > 0, got {sigma}")
    r = np.arange(kernel_size) - kernel_size // 2
    g = np.exp(-(r**2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def synth_blur(clean: Image, kernel_size: int, sigma: float) -> SamplePair:
    kernel = gaussian_kernel(kernel_size, sigma)
    # scipy's "nearest" mode repeats the edge pixel, i.e. replicate padding
    blurred = np.stack([ndimage.correlate(ch, kernel, mode="nearest") for ch in clean.values])
    mask = np.ones((clean.height, clean.width))
    return SamplePair(Image(blurred), Image(clean.values.copy()), Image(mask))


# ---------------------------------------------------------------------------
# netpbm


_TOKEN = re.compile(rb"\S+")


def _header_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens (comments skipped) and payload offset."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise ParseError("truncated header", offset=pos)
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        m = _TOKEN.match(raw, pos)
        tokens.append(m.group())
        pos = m.end()
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after header", offset=pos)
    return tokens, pos + 1


def parse_pnm(raw: bytes) -> Image:
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}; expected P5 or P6", offset=0)
    tokens, offset = _header_tokens(raw, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError("non-numeric header field", offset=2) from None
    if maxval != 255:
        raise ParseError(f"maxval must be 255, got {maxval}", offset=offset - 1)
    if width < 1 or height < 1:
        raise ParseError(f"invalid extents {width}x{height}", offset=2)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = raw[offset:offset + need]
    if len(payload) < need:
        raise ParseError(f"payload has {len(payload)} of {need} bytes", offset=offset + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Image(arr.transpose(2, 0, 1).astype(np.float64) / 255.0)


def load_pnm(path) -> Image:
    with open(path, "rb") as fh:
        return parse_pnm(fh.read())


def to_bytes8(img: Image | np.ndarray) -> np.ndarray:
    values = img.values if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    return np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)


def encode_pnm(img: Image) -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    return header + to_bytes8(img).transpose(1, 2, 0).tobytes()


def save_pnm(img: Image, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_pnm(img))
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# datasets on disk


def save_pairs(pairs: Sequence[SamplePair], directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        stem = pair.name or f"{i:05d}"
        save_pnm(pair.degraded, out / f"{stem}_in.ppm")
        save_pnm(pair.clean, out / f"{stem}_gt.ppm")
        if pair.mask is not None:
            save_pnm(pair.mask, out / f"{stem}_mask.pgm")


def load_pairs(directory, mask_dir=None) -> list[SamplePair]:
    """All ``<id>_in.ppm`` / ``<id>_gt.ppm`` pairs in ``directory``, sorted by id."""
    root = Path(directory)
    masks = Path(mask_dir) if mask_dir is not None else root
    pairs = []
    for src in sorted(root.glob("*_in.ppm")):
        stem = src.name[: -len("_in.ppm")]
        gt = root / f"{stem}_gt.ppm"
        if not gt.exists():
            raise UsageError(f"{src} has no matching {gt.name}")
        mask_path = masks / f"{stem}_mask.pgm"
        mask = load_pnm(mask_path) if mask_path.exists() else None
        if mask is not None:
            mask = Image((mask.values > 0.5).astype(np.float64))
        pairs.append(SamplePair(load_pnm(src), load_pnm(gt), mask, name=stem))
    return pairs


def make_dataset(kind: str, count: int, size: int, seed: int) -> list[SamplePair]:
    """``count`` seeded pairs of one degradation kind at ``size`` x ``size``."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        clean = synth_clean(size, seed=int(rng.integers(2**31)))
        if kind == "shadow":
            pair = synth_shadow(clean, random_polygon(rng, size), float(rng.uniform(0.35, 0.7)))
        elif kind == "rain":
            pair = synth_rain(
                clean,
                streak_count=int(rng.integers(10, 40)),
                angle=float(rng.uniform(-25, 25)),
                intensity=float(rng.uniform(0.3, 0.8)),
                seed=int(rng.integers(2**31)),
            )
        elif kind == "blur":
            pair = synth_blur(clean, kernel_size=7, sigma=float(rng.uniform(0.8, 2.0)))
        else:
            raise UsageError(f"unknown degradation kind {kind!r}")
        pair.name = f"{i:05d}"
        pairs.append(pair)
    return pairs


# ---------------------------------------------------------------------------
# iteration


def epoch_batches(pairs: Sequence, batch: int, seed: int, shuffle: bool = True, epoch: int = 0) -> list[list]:
    """One epoch of batches; the order is a pure function of ``(seed, epoch)``."""
    if batch < 1:
        raise UsageError(f"batch must be >= 1, got {batch}")
    if len(pairs) == 0:
        raise UsageError("cannot iterate an empty dataset")
    order = np.arange(len(pairs))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    return [[pairs[i] for i in order[s:s + batch]] for s in range(0, len(pairs), batch)]


def dataset_iter(pairs: Sequence, batch: int, seed: int, shuffle: bool = True, epochs: int | None = None) -> Iterator[list]:
    """Stream batches epoch after epoch (forever when ``epochs`` is None)."""
    epoch_batches(pairs, batch, seed, shuffle)  # validate eagerly

    def stream():
        epoch = 0
        while epochs is None or epoch < epochs:
            yield from epoch_batches(pairs, batch, seed, shuffle, epoch)
            epoch += 1

    return stream()
