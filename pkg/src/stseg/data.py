"""Dataset listing in the MVTec directory convention and a procedural desk corpus.

Layout::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect>/*.png          (defect "good" = normal)
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .synth import IMAGE_SUFFIXES, SynthParams, synthesize

GOOD = "good"


class DatasetError(ValueError):
    """Malformed dataset tree."""


@dataclass(frozen=True)
class TestItem:
    path: Path
    label: int
    mask_path: Path | None
    defect: str

    @property
    def key(self) -> str:
        """Relative name used to pair predictions with ground truth."""
        return f"{self.defect}/{self.path.stem}"


@dataclass
class CategoryDataset:
    name: str
    root: Path
    train_normals: list[Path] = field(default_factory=list)
    test_items: list[TestItem] = field(default_factory=list)


def _images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(gt_dir: Path, stem: str) -> Path | None:
    for cand in (f"{stem}_mask", stem):
        for suffix in IMAGE_SUFFIXES:
            p = gt_dir / f"{cand}{suffix}"
            if p.is_file():
                return p
    return None


def load_mvtec_layout(root: str | Path, category: str = "") -> CategoryDataset:
    """List a category's training normals and labelled test items.

    ``root`` may be the dataset root (with ``category``) or the category
    directory itself (empty ``category``).
    """
    cat_dir = Path(root) / category if category else Path(root)
    name = category or cat_dir.name
    train_dir, test_dir, gt_root = cat_dir / "train" / GOOD, cat_dir / "test", cat_dir / "ground_truth"
    if not cat_dir.is_dir():
        raise FileNotFoundError(f"category directory not found: {cat_dir}")
    if not train_dir.is_dir():
        raise DatasetError(f"missing training directory {train_dir}")
    if not test_dir.is_dir():
        raise DatasetError(f"missing test directory {test_dir}")
    extra = sorted(p.name for p in (cat_dir / "train").iterdir() if p.is_dir() and p.name != GOOD)
    if extra:
        raise DatasetError(f"training split of {name} must hold normals only, found {extra}")

    ds = CategoryDataset(name, cat_dir, _images(train_dir))
    if not ds.train_normals:
        raise DatasetError(f"no training images in {train_dir}")
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        defect = defect_dir.name
        for img in _images(defect_dir):
            if defect == GOOD:
                ds.test_items.append(TestItem(img, 0, None, defect))
                continue
            mask = _find_mask(gt_root / defect, img.stem)
            if mask is None:
                raise DatasetError(f"anomalous test image {img} has no ground-truth mask under {gt_root / defect}")
            ds.test_items.append(TestItem(img, 1, mask, defect))
    if not ds.test_items:
        raise DatasetError(f"no test images in {test_dir}")
    return ds


def read_mask(path: str | Path | None, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Binary uint8 mask (nonzero = anomalous); ``None`` gives an empty mask of ``shape``."""
    if path is None:
        if shape is None:
            raise ValueError("shape is required for an empty mask")
        return np.zeros(shape, dtype=np.uint8)
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.uint8)


def load_image(path: str | Path, size: int) -> np.ndarray:
    """RGB float32 in [0, 1], bilinearly resized (antialiased) to ``size x size``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def _to_png(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, optimize=False)


def _stripes(rng: np.random.Generator, size: int, period: float, angle: float, tint: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * math.pi)
    wave = 0.5 + 0.25 * np.sin(2 * math.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / period + phase)
    img = wave[..., None] * tint[None, None, :] + rng.normal(0.0, 0.02, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0)


def _source_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """High-contrast procedural texture used as anomaly content."""
    kind = rng.integers(3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    colors = rng.uniform(0, 1, size=(2, 3))
    if kind == 0:
        cell = int(rng.integers(3, 9))
        pat = ((yy // cell + xx // cell) % 2)[..., None]
    elif kind == 1:
        pat = rng.uniform(0, 1, size=(size, size, 1))
    else:
        freq = rng.uniform(0.2, 0.6)
        pat = (0.5 + 0.5 * np.sin(freq * xx) * np.cos(freq * 0.7 * yy))[..., None]
    return np.clip(colors[0] * pat + colors[1] * (1 - pat), 0.0, 1.0)


def generate_desk_corpus(
    root: str | Path,
    seed: int = 0,
    n_train: int = 20,
    n_test: int = 20,
    size: int = 64,
    category: str = "desk",
    n_sources: int = 12,
    params: SynthParams | None = None,
) -> CategoryDataset:
    """Write a small deterministic texture category plus an anomaly-source pool.

    Normal images are tinted sinusoidal stripes with a random phase and mild
    noise. Half the test images carry defects composed from held-out source
    textures under Perlin masks; training synthesis draws from ``<root>/sources``.
    The clean image behind each defect is kept under ``<root>/reference``.
    """
    root = Path(root)
    params = params or SynthParams(area_bounds=(0.02, 0.3), beta_range=(0.5, 1.0))
    rng = np.random.default_rng(seed)
    period = rng.uniform(6.0, 10.0)
    angle = rng.uniform(0, math.pi)
    tint = rng.uniform(0.5, 1.0, size=3)

    cat = root / category
    for i in range(n_train):
        _to_png(_stripes(rng, size, period, angle, tint), cat / "train" / GOOD / f"{i:03d}.png")
    for i in range(n_sources):
        _to_png(_source_texture(rng, size), root / "sources" / f"src_{i:03d}.png")

    held_out = [_source_texture(rng, size) for _ in range(n_sources)]
    n_bad = n_test // 2
    for i in range(n_test - n_bad):
        _to_png(_stripes(rng, size, period, angle, tint), cat / "test" / GOOD / f"{i:03d}.png")
    for i in range(n_bad):
        normal = _stripes(rng, size, period, angle, tint)
        # quantize first so the written pair satisfies the blend equation off-mask exactly
        normal = np.rint(normal * 255.0) / 255.0
        sample = synthesize(normal, held_out, rng, params)
        _to_png(sample.anomalous_image, cat / "test" / "defect" / f"{i:03d}.png")
        _to_png(sample.mask, cat / "ground_truth" / "defect" / f"{i:03d}_mask.png")
        _to_png(normal, root / "reference" / category / "defect" / f"{i:03d}.png")
    return load_mvtec_layout(root, category)

