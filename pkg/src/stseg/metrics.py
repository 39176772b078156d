"""Image-, pixel- and instance-level evaluation.

All curve metrics are rank statistics over pooled predictions. Precision-recall
style areas use the right-continuous step sum over thresholds taken in
descending order::

    AP = sum_n (R_n - R_{n-1}) * P_n

with every distinct prediction value as a threshold and "positive" meaning
``prediction >= threshold``. Instance recall counts a ground-truth region
(maximal 8-connected component) as found when more than half of its pixels are
positive.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.stats import rankdata

DOWNSAMPLE_MODES = ("round", "floor", "ceil", "nearest")
METRIC_NAMES = ("image_auc", "pixel_auc", "pixel_ap", "iap", "iap_at_k")
_TOL = 1e-9


def _as_size(size: int | Sequence[int]) -> tuple[int, int]:
    if isinstance(size, (int, np.integer)):
        return int(size), int(size)
    h, w = size
    return int(h), int(w)


def _check_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary (values 0 and 1 only)")
    return mask


def downsample_gt(mask: np.ndarray, out_size: int | Sequence[int] = 256, mode: str = "round") -> np.ndarray:
    """Resize a binary mask and re-binarize it.

    ``round`` keeps pixels whose bilinear value is at least 0.5, ``floor`` only
    those that stay fully 1, ``ceil`` any with nonzero coverage, and ``nearest``
    picks the nearest source pixel.
    """
    if mode not in DOWNSAMPLE_MODES:
        raise ValueError(f"unknown downsample mode {mode!r}; expected one of {DOWNSAMPLE_MODES}")
    mask = _check_binary(mask)
    size = _as_size(out_size)
    t = torch.from_numpy(mask.astype(np.float64))[None, None]
    if mode == "nearest":
        out = F.interpolate(t, size=size, mode="nearest")[0, 0].numpy()
        return out.astype(np.uint8)
    if tuple(mask.shape) == size:
        v = t[0, 0].numpy()
    else:
        v = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()
    if mode == "round":
        out = v >= 0.5 - _TOL
    elif mode == "floor":
        out = v >= 1.0 - _TOL
    else:
        out = v > _TOL
    return out.astype(np.uint8)


def resize_map(values: np.ndarray, out_size: int | Sequence[int]) -> np.ndarray:
    """Bilinear resize of a float score map."""
    size = _as_size(out_size)
    if tuple(values.shape) == size:
        return values
    t = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


def _auc(scores: np.ndarray, labels: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores)  # ties get average ranks
    # 2*U is an integer, so the subtraction is exact and only the division rounds
    u2 = 2.0 * float(ranks[labels].sum()) - n_pos * (n_pos + 1.0)
    return u2 / (2.0 * n_pos * n_neg)


def image_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve of image scores against binary labels (1 = anomalous)."""
    return _auc(np.asarray(scores), np.asarray(labels))


def _step_area(delta_recall: np.ndarray, precision: np.ndarray) -> float:
    return math.fsum((delta_recall * precision).tolist())


def _pool(predictions: Iterable[np.ndarray], gts: Iterable[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    preds, masks = [], []
    for p, g in zip(predictions, gts):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"prediction {p.shape} and ground truth {g.shape} shapes differ")
        preds.append(p.ravel())
        masks.append(g.ravel().astype(bool))
    if not preds:
        raise ValueError("no prediction/ground-truth pairs given")
    return np.concatenate(preds), np.concatenate(masks)


def _cumulative_counts(scores: np.ndarray, positive: np.ndarray):
    """Distinct thresholds (descending) with cumulative TP/FP counts at each."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order]
    tp = np.cumsum(pos, dtype=np.int64)
    fp = np.cumsum(~pos, dtype=np.int64)
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    return s[last], tp[last], fp[last]


def average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positive = np.asarray(positive).ravel().astype(bool)
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    _, tp, fp = _cumulative_counts(scores, positive)
    dtp = np.diff(tp, prepend=0)
    return _step_area(dtp / n_pos, tp / (tp + fp))


def pixel_auc_ap(predictions: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> tuple[float, float]:
    """Pixel ROC-AUC and AP pooled over every pixel of every pair."""
    scores, positive = _pool(predictions, gts)
    return _auc(scores, positive), average_precision(scores, positive)


@dataclass
class InstanceRegion:
    coords: np.ndarray  # (K, 2) row/col indices

    @property
    def size(self) -> int:
        return int(len(self.coords))


def _structure(adjacency: int) -> np.ndarray:
    if adjacency == 8:
        return np.ones((3, 3), dtype=int)
    if adjacency == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ValueError(f"adjacency must be 4 or 8, got {adjacency}")


def label_instances(mask: np.ndarray, adjacency: int = 8) -> tuple[np.ndarray, int]:
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=_structure(adjacency))
    return labels, int(n)


def connected_components(mask: np.ndarray, adjacency: int = 8) -> list[InstanceRegion]:
    labels, n = label_instances(mask, adjacency)
    return [InstanceRegion(np.argwhere(labels == i)) for i in range(1, n + 1)]


def instance_detection_thresholds(prediction: np.ndarray, gt: np.ndarray, adjacency: int = 8) -> np.ndarray:
    """Highest threshold at which each GT region still has more than half its pixels positive.

    For a region of ``n`` pixels that is the ``(n // 2 + 1)``-th largest score inside it.
    """
    labels, n = label_instances(gt, adjacency)
    out = np.empty(n, dtype=np.float64)
    if n == 0:
        return out
    flat_labels = labels.ravel()
    flat_pred = np.asarray(prediction, dtype=np.float64).ravel()
    inside = flat_labels > 0
    lab, val = flat_labels[inside], flat_pred[inside]
    order = np.lexsort((-val, lab))
    lab, val = lab[order], val[order]
    starts = np.searchsorted(lab, np.arange(1, n + 1))
    sizes = np.bincount(lab, minlength=n + 1)[1:]
    out[:] = val[starts + sizes // 2]
    return out


@dataclass
class IAPResult:
    iap: float
    iap_at_k: float
    k: float
    recall: np.ndarray = field(repr=False)
    precision: np.ndarray = field(repr=False)
    thresholds: np.ndarray = field(repr=False)


def iap(
    predictions: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    k: float = 90.0,
    adjacency: int = 8,
    n_thresholds: int | None = None,
) -> IAPResult:
    """Instance average precision: pooled pixel precision against instance recall.

    ``n_thresholds`` switches to a quantile-subsampled threshold set for speed;
    by default every distinct prediction value is used.
    """
    predictions = [np.asarray(p, dtype=np.float64) for p in predictions]
    gts = [np.asarray(g) for g in gts]
    det = np.concatenate([instance_detection_thresholds(p, g, adjacency) for p, g in zip(predictions, gts)])
    n_inst = det.size
    if n_inst == 0:
        raise ValueError("IAP needs at least one ground-truth instance")
    scores, positive = _pool(predictions, gts)
    thr, tp, fp = _cumulative_counts(scores, positive)
    if n_thresholds is not None and n_thresholds < thr.size:
        keep = np.unique(np.round(np.linspace(0, thr.size - 1, n_thresholds)).astype(int))
        thr, tp, fp = thr[keep], tp[keep], fp[keep]
    det_sorted = np.sort(det)
    found = n_inst - np.searchsorted(det_sorted, thr, side="left")
    precision = tp / (tp + fp)
    recall = found / n_inst
    area = _step_area(np.diff(found, prepend=0) / n_inst, precision)
    reach = found * 100.0 >= k * n_inst
    at_k = float(precision[reach].max()) if reach.any() else 0.0
    return IAPResult(area, at_k, k, recall, precision, thr)


def top_t_score(full_map: np.ndarray, t: int) -> float:
    """Mean of the ``t`` largest values of a score map."""
    values = np.asarray(full_map, dtype=np.float64).ravel()
    if not 1 <= t <= values.size:
        raise ValueError(f"T must lie in [1, {values.size}], got {t}")
    return float(np.partition(values, values.size - t)[values.size - t :].mean())


@dataclass
class EvalPair:
    prediction: np.ndarray
    gt_mask: np.ndarray
    image_label: int
    image_score: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.prediction.shape != self.gt_mask.shape:
            raise ValueError(f"{self.name}: prediction {self.prediction.shape} vs mask {self.gt_mask.shape}")
        if bool(self.gt_mask.any()) != bool(self.image_label):
            raise ValueError(f"{self.name}: ground-truth mask must be empty exactly for normal images")


@dataclass
class MetricsReport:
    category: str
    image_auc: float
    pixel_auc: float
    pixel_ap: float
    iap: float
    iap_at_k: float
    k: float = 90.0
    n_images: int = 0
    n_instances: int = 0

    def row(self) -> dict[str, float | str]:
        return {"category": self.category, **{m: getattr(self, m) for m in METRIC_NAMES}}


def evaluate_pairs(pairs: Sequence[EvalPair], category: str = "", k: float = 90.0, top_t: int = 100) -> tuple[MetricsReport, dict]:
    """All metrics for one category. Also returns the curves used for plotting."""
    scores = [p.image_score if p.image_score is not None else top_t_score(p.prediction, top_t) for p in pairs]
    labels = [p.image_label for p in pairs]
    preds = [p.prediction for p in pairs]
    gts = [p.gt_mask for p in pairs]
    i_auc = image_auc(scores, labels)
    p_auc, p_ap = pixel_auc_ap(preds, gts)
    inst = iap(preds, gts, k=k)
    n_inst = sum(label_instances(g)[1] for g in gts)
    report = MetricsReport(category, i_auc, p_auc, p_ap, inst.iap, inst.iap_at_k, k, len(pairs), n_inst)
    curves = {"image_scores": np.asarray(scores), "image_labels": np.asarray(labels), "iap": inst}
    curves["pixel_scores"], curves["pixel_labels"] = _pool(preds, gts)
    return report, curves


def average_reports(reports: Sequence[MetricsReport], name: str = "mean") -> MetricsReport:
    if not reports:
        raise ValueError("no reports to average")
    vals = {m: float(np.mean([getattr(r, m) for r in reports])) for m in METRIC_NAMES}
    return MetricsReport(
        name, **vals, k=reports[0].k,
        n_images=sum(r.n_images for r in reports), n_instances=sum(r.n_instances for r in reports),
    )


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_reports(reports: Sequence[MetricsReport], out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
    """Write per-category rows plus an averaged row as CSV and JSON. Output is byte-stable."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = list(reports)
    if len(rows) > 1:
        rows.append(average_reports(rows))
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["category", *METRIC_NAMES])
        for r in rows:
            writer.writerow([_fmt(v) for v in r.row().values()])
    json_path = out_dir / f"{stem}.json"
    payload = {"categories": [asdict(r) for r in rows[: len(reports)]]}
    if len(rows) > len(reports):
        payload["average"] = asdict(rows[-1])
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def roc_points(scores: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, tp, fp = _cumulative_counts(np.asarray(scores, dtype=np.float64), np.asarray(positive, dtype=bool))
    return np.r_[0.0, fp / fp[-1]], np.r_[0.0, tp / tp[-1]]


def pr_points(scores: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, tp, fp = _cumulative_counts(np.asarray(scores, dtype=np.float64), np.asarray(positive, dtype=bool))
    return tp / tp[-1], tp / (tp + fp)


def plot_curves(curves: dict, out_dir: str | Path, category: str) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    fpr, tpr = roc_points(curves["image_scores"], curves["image_labels"])
    pfpr, ptpr = roc_points(curves["pixel_scores"], curves["pixel_labels"])
    rec, prec = pr_points(curves["pixel_scores"], curves["pixel_labels"])
    inst: IAPResult = curves["iap"]
    panels = [
        ("roc", [(fpr, tpr, "image"), (pfpr, ptpr, "pixel")], "false positive rate", "true positive rate"),
        ("pr", [(rec, prec, "pixel")], "recall", "precision"),
        ("iap", [(inst.recall, inst.precision, "instance")], "instance recall", "pixel precision"),
    ]
    for name, series, xlabel, ylabel in panels:
        fig, ax = plt.subplots(figsize=(4, 4))
        for x, y, label in series:
            ax.step(x, y, where="post", label=label)
        ax.set(xlabel=xlabel, ylabel=ylabel, xlim=(0, 1), ylim=(0, 1.02), title=f"{category} {name}")
        ax.legend(loc="lower left")
        fig.tight_layout()
        path = out_dir / f"{category}_{name}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        paths.append(path)
    return paths


def build_pairs(dataset, maps: Sequence[np.ndarray], scores: Sequence[float | None], eval_size: int = 256) -> list[EvalPair]:
    """Bring predictions and masks of a listed test split to the evaluation grid."""
    from .data import read_mask

    pairs = []
    for item, pred, score in zip(dataset.test_items, maps, scores):
        raw = read_mask(item.mask_path, np.asarray(pred).shape)
        gt = downsample_gt(raw, eval_size, "round")
        pairs.append(EvalPair(resize_map(np.asarray(pred), eval_size), gt, item.label, score, item.key))
    return pairs


def evaluate_run(pred_dir: str | Path, gt_root: str | Path, config=None, plots_dir: str | Path | None = None) -> MetricsReport:
    """Pair ``<pred_dir>/<defect>/<stem>.png`` maps with a category's test split and score them.

    Image scores come from the JSON sidecars when present, otherwise from the
    top-T mean of the map at evaluation size.
    """
    from PIL import Image

    from .config import TrainConfig
    from .data import load_mvtec_layout

    config = config or TrainConfig()
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    # gt_root is either the category directory or the dataset root plus config.category
    category = "" if (Path(gt_root) / "test").is_dir() else config.category
    dataset = load_mvtec_layout(gt_root, category)
    maps, scores = [], []
    for item in dataset.test_items:
        png = pred_dir / f"{item.key}.png"
        if not png.is_file():
            raise FileNotFoundError(f"no prediction for {item.key} (expected {png})")
        with Image.open(png) as im:
            maps.append(np.asarray(im, dtype=np.float64) / 65535.0)
        meta = png.with_suffix(".json")
        scores.append(json.loads(meta.read_text())["image_score"] if meta.is_file() else None)
    pairs = build_pairs(dataset, maps, scores, config.eval_size)
    report, curves = evaluate_pairs(pairs, dataset.name, config.iap_k, config.top_t)
    if plots_dir is not None:
        plot_curves(curves, plots_dir, dataset.name)
    return report
