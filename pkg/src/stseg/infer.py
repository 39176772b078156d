"""End-to-end anomaly maps and image scores."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor, nn

from .config import TrainConfig
from .data import CategoryDataset, load_image
from .fusion import SegmentationHead, build_fused_input
from .losses import EPS, distance_map, similarity_map
from .metrics import build_pairs, evaluate_pairs, plot_curves, top_t_score
from .networks import TeacherNet
from .trainer import build_teacher, load_head, load_student, normalize, run_dir_for

PNG_SCALE = 65535


@dataclass
class PredictionResult:
    full_map: np.ndarray
    image_score: float


def image_score(full_map: np.ndarray, t: int) -> float:
    return top_t_score(full_map, t)


def empirical_fusion_score(
    teacher_pyr: Sequence[Tensor],
    student_pyr: Sequence[Tensor],
    out_size: tuple[int, int],
    aggregation: str = "product",
    normalize_each: bool = True,
    eps: float = EPS,
) -> Tensor:
    """Aggregate upsampled per-level cosine distances into one (N, H, W) map.

    ``normalize_each`` rescales every image's map to [0, 1] by its own min and
    max (a constant map becomes all zeros).
    """
    if aggregation not in ("sum", "product"):
        raise ValueError(f"aggregation must be sum or product, got {aggregation!r}")
    agg = None
    for f_t, f_s in zip(teacher_pyr, student_pyr):
        d = distance_map(similarity_map(f_t, f_s, eps)).unsqueeze(1)
        d = F.interpolate(d, size=out_size, mode="bilinear", align_corners=False)
        if agg is None:
            agg = d
        else:
            agg = agg + d if aggregation == "sum" else agg * d
    agg = agg[:, 0]
    if not normalize_each:
        return agg
    flat = agg.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1)
    span = (flat.max(dim=1).values.view(-1, 1, 1) - lo)
    return torch.where(span > 0, (agg - lo) / span.clamp_min(1e-12), torch.zeros_like(agg))


class Predictor:
    """Frozen teacher/student plus either the segmentation head or empirical fusion."""

    def __init__(self, config: TrainConfig, teacher: TeacherNet, student: nn.Module, head: SegmentationHead | None = None):
        if config.seg and head is None:
            raise ValueError("config enables the segmentation head but none was given")
        self.config = config
        self.teacher = teacher.eval()
        self.student = student.eval()
        self.head = head.eval() if head is not None else None

    @classmethod
    def from_run(cls, config: TrainConfig, run_dir: str | Path | None = None, force: bool = False) -> "Predictor":
        run_dir = Path(run_dir) if run_dir is not None else run_dir_for(config)
        if not run_dir.is_dir():
            raise FileNotFoundError(f"run directory not found: {run_dir}")
        teacher = build_teacher(config)
        student = load_student(config, run_dir, force)
        head = load_head(config, run_dir, force) if config.seg else None
        return cls(config, teacher, student, head)

    @property
    def scoring(self) -> str:
        return "segmentation" if self.head is not None else f"empirical-{self.config.fusion_aggregation}"

    @torch.no_grad()
    def predict_map(self, images: Tensor) -> np.ndarray:
        """Normalized (N, 3, H, W) batch to (N, H, W) anomaly maps in [0, 1]."""
        size = tuple(images.shape[-2:])
        t_pyr, s_pyr = self.teacher(images), self.student(images)
        if self.head is None:
            out = empirical_fusion_score(t_pyr, s_pyr, size, self.config.fusion_aggregation, eps=self.config.eps)
        else:
            y = self.head(build_fused_input(t_pyr, s_pyr, self.config.fusion_mode, self.config.eps))
            out = F.interpolate(y, size=size, mode="bilinear", align_corners=False)[:, 0]
        return out.clamp(0.0, 1.0).numpy()

    def predict_images(self, images: np.ndarray, batch_size: int = 16) -> list[PredictionResult]:
        """(N, H, W, 3) RGB in [0, 1] to one result per image."""
        results = []
        for start in range(0, len(images), batch_size):
            maps = self.predict_map(normalize(images[start : start + batch_size], self.config))
            results += [PredictionResult(m, image_score(m, self.config.top_t)) for m in maps]
        return results

    def predict_paths(self, paths: Sequence[str | Path], batch_size: int = 16) -> list[PredictionResult]:
        images = np.stack([load_image(p, self.config.image_size) for p in paths])
        return self.predict_images(images, batch_size)


def write_prediction(out_dir: str | Path, key: str, result: PredictionResult, source: str | Path, t: int, config_hash: str) -> Path:
    """16-bit PNG map (value = round(65535 p)) and a JSON sidecar at ``out_dir/key``."""
    png = Path(out_dir) / f"{key}.png"
    png.parent.mkdir(parents=True, exist_ok=True)
    values = np.rint(np.clip(result.full_map, 0.0, 1.0) * PNG_SCALE).astype(np.uint16)
    Image.fromarray(values).save(png)
    meta = {"path": str(source), "image_score": result.image_score, "T": t, "config_hash": config_hash}
    png.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return png


def read_prediction(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / PNG_SCALE


def predict_dataset(predictor: Predictor, dataset: CategoryDataset, out_dir: str | Path | None = None):
    """Predict every test item; optionally write the per-image PNG/JSON pairs."""
    results = predictor.predict_paths([item.path for item in dataset.test_items])
    if out_dir is not None:
        chash = predictor.config.config_hash()
        for item, res in zip(dataset.test_items, results):
            write_prediction(out_dir, item.key, res, item.path, predictor.config.top_t, chash)
    return results


def evaluate_predictor(predictor: Predictor, dataset: CategoryDataset, plots_dir: str | Path | None = None):
    """Predict a test split in memory and compute its :class:`MetricsReport`."""
    cfg = predictor.config
    results = predict_dataset(predictor, dataset)
    pairs = build_pairs(dataset, [r.full_map for r in results], [r.image_score for r in results], cfg.eval_size)
    report, curves = evaluate_pairs(pairs, dataset.name, cfg.iap_k, cfg.top_t)
    if plots_dir is not None:
        plot_curves(curves, plots_dir, dataset.name)
    return report
