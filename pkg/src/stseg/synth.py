"""Online synthesis of anomalous training images.

A Perlin noise field is thresholded into an irregular binary mask, and the
masked region of a normal image is blended with a texture drawn from an
arbitrary source pool::

    I_a = beta * (M * A) + (1 - beta) * (M * I_n) + (1 - M) * I_n

All functions take an explicit ``numpy.random.Generator`` (or seed) and keep no
global state, so each data worker can own an independent stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

BETA_RANGE = (0.15, 1.0)


class SynthesisError(RuntimeError):
    """Raised when no acceptable anomaly mask is found within the retry budget."""


@dataclass(frozen=True)
class NoiseField:
    values: np.ndarray
    grid_scales: tuple[int, int]
    seed: int


@dataclass(frozen=True)
class SynthParams:
    """Knobs for :func:`synthesize`.

    ``grid_scales`` lists the lattice periods drawn (independently per axis) for
    each mask attempt. The threshold applies to noise values in roughly [-1, 1];
    0.5 yields a median coverage near 5% (10th-90th percentile 3-8%).
    """

    grid_scales: tuple[int, ...] = (2, 4, 8, 16)
    threshold: float = 0.5
    area_bounds: tuple[float, float] = (0.01, 0.5)
    beta_range: tuple[float, float] = BETA_RANGE
    normal_prob: float = 0.0
    max_retries: int = 20

    def __post_init__(self):
        lo, hi = self.area_bounds
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"area_bounds must satisfy 0 <= lo < hi <= 1, got {self.area_bounds}")
        b_lo, b_hi = self.beta_range
        if not 0.0 <= b_lo <= b_hi <= 1.0:
            raise ValueError(f"beta_range must lie in [0, 1], got {self.beta_range}")
        if not self.grid_scales or min(self.grid_scales) < 1:
            raise ValueError(f"grid_scales must be positive integers, got {self.grid_scales}")
        if not 0.0 <= self.normal_prob <= 1.0:
            raise ValueError(f"normal_prob must lie in [0, 1], got {self.normal_prob}")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


@dataclass
class SyntheticSample:
    normal_image: np.ndarray
    source_image: np.ndarray
    mask: np.ndarray
    beta: float
    anomalous_image: np.ndarray
    grid_scales: tuple[int, int] = field(default=(0, 0))

    @property
    def anomalous_fraction(self) -> float:
        return float(self.mask.mean())


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def generate_perlin(shape: tuple[int, int], grid_scales: tuple[int, int], seed: int) -> NoiseField:
    """Gradient-lattice Perlin noise of size ``shape`` with ``grid_scales`` cells per axis.

    Unit gradients are drawn at each of the ``(sy + 1) x (sx + 1)`` lattice corners;
    every pixel blends the four corner dot products with the quintic fade curve.
    """
    h, w = (int(s) for s in shape)
    sy, sx = (int(s) for s in grid_scales)
    if h < 8 or w < 8:
        raise ValueError(f"noise shape must be at least 8x8, got {(h, w)}")
    if sy < 1 or sx < 1:
        raise ValueError(f"grid_scales must be >= 1 per axis, got {grid_scales}")
    if sy > h or sx > w:
        raise ValueError(f"shape {(h, w)} is smaller than one lattice cell for scales {(sy, sx)}")

    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 2.0 * math.pi, size=(sy + 1, sx + 1))
    grad = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    # pixel centres in lattice coordinates
    ys = (np.arange(h) + 0.5) * sy / h
    xs = (np.arange(w) + 0.5) * sx / w
    y0 = np.minimum(np.floor(ys).astype(int), sy - 1)
    x0 = np.minimum(np.floor(xs).astype(int), sx - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")

    def corner(dy: int, dx: int) -> np.ndarray:
        g = grad[Y0 + dy, X0 + dx]
        return g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)

    u, v = _fade(fy), _fade(fx)
    top = corner(0, 0) * (1 - v) + corner(0, 1) * v
    bottom = corner(1, 0) * (1 - v) + corner(1, 1) * v
    values = top * (1 - u) + bottom * u
    return NoiseField(values=values * math.sqrt(2.0), grid_scales=(sy, sx), seed=int(seed))


def binarize(noise: NoiseField | np.ndarray, threshold: float) -> np.ndarray:
    if not math.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    values = noise.values if isinstance(noise, NoiseField) else np.asarray(noise)
    return (values > threshold).astype(np.float32)


def compose_anomaly(normal: np.ndarray, source: np.ndarray, mask: np.ndarray, beta: float) -> np.ndarray:
    """Blend ``source`` into ``normal`` under ``mask`` with opacity ``beta``.

    ``mask`` is (H, W) or (H, W, 1) and is broadcast over channels. The result is
    clipped to [0, 1]; outside the mask it equals ``normal`` exactly.
    """
    normal = np.asarray(normal)
    source = np.asarray(source)
    mask = np.asarray(mask)
    if normal.shape != source.shape:
        raise ValueError(f"normal {normal.shape} and source {source.shape} shapes differ")
    if mask.ndim == normal.ndim - 1:
        mask = mask[..., None]
    if mask.shape[:2] != normal.shape[:2] or mask.ndim != normal.ndim:
        raise ValueError(f"mask shape {mask.shape} does not match image {normal.shape}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    mask = mask.astype(normal.dtype, copy=False)
    blended = beta * (mask * source) + (1.0 - beta) * (mask * normal) + (1.0 - mask) * normal
    # off-mask pixels are copied rather than recomputed, so they are bit-identical
    out = np.where(mask > 0, blended, normal)
    return np.clip(out, 0.0, 1.0).astype(normal.dtype, copy=False)


def _fit_to(image: Image.Image, size: tuple[int, int]) -> Image.Image:
    """Resize so the shorter side matches, then centre-crop to ``size`` (h, w)."""
    h, w = size
    scale = max(h / image.height, w / image.width)
    rh, rw = max(h, round(image.height * scale)), max(w, round(image.width * scale))
    image = image.resize((rw, rh), Image.BILINEAR)
    top, left = (rh - h) // 2, (rw - w) // 2
    return image.crop((left, top, left + w, top + h))


def load_rgb(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Decode an image to float32 RGB in [0, 1]; grayscale is replicated to 3 channels."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None:
            im = _fit_to(im, size)
        return np.asarray(im, dtype=np.float32) / 255.0


class SourcePool:
    """Lazily decoded pool of anomaly-source textures, fitted to one target shape."""

    def __init__(self, paths: Sequence[str | Path], size: tuple[int, int]):
        if not paths:
            raise ValueError("source pool is empty")
        self.paths = [Path(p) for p in paths]
        self.size = (int(size[0]), int(size[1]))
        self._cache: dict[int, np.ndarray] = {}

    @classmethod
    def from_dir(cls, root: str | Path, size: tuple[int, int]) -> "SourcePool":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"source pool directory not found: {root}")
        paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise ValueError(f"no images found in source pool {root}")
        return cls(paths, size)

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, idx: int) -> np.ndarray:
        if idx not in self._cache:
            self._cache[idx] = load_rgb(self.paths[idx], self.size)
        return self._cache[idx]


def _draw_mask(shape, rng: np.random.Generator, params: SynthParams):
    lo, hi = params.area_bounds
    for _ in range(params.max_retries):
        scales = (int(rng.choice(params.grid_scales)), int(rng.choice(params.grid_scales)))
        seed = int(rng.integers(0, 2**31 - 1))
        mask = binarize(generate_perlin(shape, scales, seed), params.threshold)
        if lo <= mask.mean() <= hi:
            return mask, scales
    raise SynthesisError(
        f"no mask with anomalous fraction in {params.area_bounds} after {params.max_retries} draws "
        f"(shape={tuple(shape)}, threshold={params.threshold}, grid_scales={params.grid_scales})"
    )


def synthesize(
    normal: np.ndarray,
    source_pool: Sequence[np.ndarray],
    rng: np.random.Generator,
    params: SynthParams = SynthParams(),
) -> SyntheticSample:
    if len(source_pool) == 0:
        raise ValueError("source pool is empty")
    shape = normal.shape[:2]
    source = np.asarray(source_pool[int(rng.integers(len(source_pool)))], dtype=normal.dtype)
    if source.shape != normal.shape:
        raise ValueError(f"source image {source.shape} does not match normal image {normal.shape}")

    if params.normal_prob > 0 and rng.random() < params.normal_prob:
        mask = np.zeros(shape, dtype=np.float32)
        return SyntheticSample(normal, source, mask, 0.0, normal.copy())

    mask, scales = _draw_mask(shape, rng, params)
    beta = float(rng.uniform(*params.beta_range))
    anomalous = compose_anomaly(normal, source, mask, beta)
    return SyntheticSample(normal, source, mask, beta, anomalous, scales)
