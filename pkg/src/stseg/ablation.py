"""The den / ed / seg ablation grid.

Rows run in a fixed order. ``ed`` off swaps the encoder-decoder
student for a teacher-architecture copy; ``seg`` off replaces the segmentation
head by the product of upsampled cosine distances.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from .config import TrainConfig
from .data import CategoryDataset, load_mvtec_layout
from .infer import Predictor, evaluate_predictor
from .trainer import TrainData, train

TABLE4_ROWS: tuple[tuple[bool, bool, bool], ...] = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)

COLUMNS = (
    "exp", "den", "ed", "seg", "config_hash", "student_arch", "scoring",
    "image_auc", "pixel_auc", "pixel_ap", "iap", "iap_at_k",
)


def run_ablation(
    base: TrainConfig,
    out_dir: str | Path,
    rows: Sequence[tuple[bool, bool, bool]] = TABLE4_ROWS,
    dataset: CategoryDataset | None = None,
    data: TrainData | None = None,
) -> list[dict]:
    """Train and evaluate every flag row; write ``ablation.csv`` and return the rows."""
    out_dir = Path(out_dir)
    dataset = dataset or load_mvtec_layout(base.data_root, base.category)
    data = data or TrainData.from_config(base, dataset)
    table = []
    for exp, (den, ed, seg) in enumerate(rows, start=1):
        cfg = base.replace(den=den, ed=ed, seg=seg).validate()
        run_dir = out_dir / "runs" / cfg.config_hash()
        train(cfg, "both", data, run_dir)
        predictor = Predictor.from_run(cfg, run_dir)
        report = evaluate_predictor(predictor, dataset)
        table.append({
            "exp": exp, "den": den, "ed": ed, "seg": seg,
            "config_hash": cfg.config_hash(),
            "student_arch": type(predictor.student).__name__,
            "scoring": predictor.scoring,
            **{m: report.row()[m] for m in COLUMNS[7:]},
        })
    write_table(table, out_dir / "ablation.csv")
    return table


def write_table(table: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in table:
            writer.writerow([_cell(row[c]) for c in COLUMNS])
    return path


def _cell(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
