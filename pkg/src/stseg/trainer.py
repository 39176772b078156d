"""Two-phase training.

Phase 1 distils the frozen teacher into the student. With denoising on, the
student sees the synthetic anomalous image while the teacher sees the clean
one; with it off both see the clean image. Phase 2 freezes both networks, feeds
them the anomalous image and fits the segmentation head to the stride-4 mask.
Phases run strictly one after the other.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import TrainConfig
from .data import CategoryDataset, load_image, load_mvtec_layout
from .fusion import SegmentationHead, build_fused_input, fused_channels
from .losses import distillation_loss, segmentation_loss
from .networks import (
    TeacherNet,
    build_student,
    freeze,
    load_checkpoint,
    load_pretrained_teacher,
    random_teacher,
    save_checkpoint,
    state_checksum,
)
from .synth import SourcePool, SynthParams, synthesize

log = logging.getLogger(__name__)

STUDENT_CKPT = "student.ckpt"
SEG_CKPT = "seg.ckpt"
RECORD = "record.json"


class TrainingError(RuntimeError):
    """Raised when a loss turns non-finite or a frozen network changes."""


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    flags: dict[str, bool]
    student_losses: list[float] = field(default_factory=list)
    seg_losses: list[float] = field(default_factory=list)
    wall_clock: dict[str, float] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def set_determinism(config: TrainConfig) -> None:
    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(config.deterministic)


def synth_params(config: TrainConfig) -> SynthParams:
    return SynthParams(
        grid_scales=config.perlin_scales,
        threshold=config.perlin_threshold,
        area_bounds=(config.mask_area_min, config.mask_area_max),
        normal_prob=config.normal_prob,
    )


def normalize(images: np.ndarray | Tensor, config: TrainConfig) -> Tensor:
    """(N, H, W, 3) in [0, 1] to normalized (N, 3, H, W) float32."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.ndim == 3:
        x = x[None]
    x = x.permute(0, 3, 1, 2)
    mean = torch.tensor(config.norm_mean, dtype=torch.float32).view(1, 3, 1, 1)
    std = torch.tensor(config.norm_std, dtype=torch.float32).view(1, 3, 1, 1)
    return (x - mean) / std


@dataclass
class TrainData:
    normals: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    sources: SourcePool | list[np.ndarray]

    @classmethod
    def from_config(cls, config: TrainConfig, dataset: CategoryDataset | None = None) -> "TrainData":
        if dataset is None:
            dataset = load_mvtec_layout(config.data_root, config.category)
        size = config.image_size
        normals = np.stack([load_image(p, size) for p in dataset.train_normals])
        source_dir = Path(config.source_dir) if config.source_dir else Path(config.data_root) / "sources"
        return cls(normals, SourcePool.from_dir(source_dir, (size, size)))


class SyntheticBatches:
    """Endless stream of (clean, anomalous, mask) batches from one seeded generator."""

    def __init__(self, data: TrainData, config: TrainConfig, stream: int):
        self.data = data
        self.config = config
        self.params = synth_params(config)
        self.rng = np.random.default_rng([config.seed, stream])

    def next(self) -> tuple[Tensor, Tensor, Tensor]:
        idx = self.rng.integers(len(self.data.normals), size=self.config.batch_size)
        samples = [synthesize(self.data.normals[i], self.data.sources, self.rng, self.params) for i in idx]
        clean = normalize(np.stack([s.normal_image for s in samples]), self.config)
        anomalous = normalize(np.stack([s.anomalous_image for s in samples]), self.config)
        masks = torch.from_numpy(np.stack([s.mask for s in samples])[:, None].astype(np.float32))
        return clean, anomalous, masks


def downsample_masks(masks: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of (N, 1, H, W) binary masks, re-binarized at 0.5."""
    if tuple(masks.shape[-2:]) == tuple(size):
        return masks
    v = F.interpolate(masks.double(), size=size, mode="bilinear", align_corners=False)
    return (v >= 0.5 - 1e-9).to(masks.dtype)


def _optimizer(params, config: TrainConfig, lr: float, steps: int):
    params = list(params)
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=lr, momentum=config.momentum, weight_decay=config.weight_decay)
    else:
        opt = torch.optim.Adam(params, lr=lr, weight_decay=config.weight_decay)
    if config.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda t: 0.5 * (1.0 + math.cos(math.pi * t / steps)))
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda t: 1.0)
    return opt, sched


def _check_finite(loss: Tensor, phase: str, step: int, history: list[float]) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        tail = ", ".join(f"{v:.4g}" for v in history[-5:])
        raise TrainingError(f"{phase}: non-finite loss at step {step} (recent losses: [{tail}])")
    return value


def build_teacher(config: TrainConfig) -> TeacherNet:
    if config.teacher_ckpt:
        return load_pretrained_teacher(config.teacher_ckpt)
    return random_teacher(config.teacher_seed)


def train_student(
    config: TrainConfig, data: TrainData, teacher: TeacherNet, student: nn.Module | None = None
) -> tuple[nn.Module, list[float]]:
    if student is None:
        torch.manual_seed(config.seed)
        student = build_student(config.ed)
    teacher_sum = state_checksum(teacher)
    student.train()
    opt, sched = _optimizer(student.parameters(), config, config.student_lr, config.student_steps)
    batches = SyntheticBatches(data, config, stream=1)
    losses: list[float] = []
    for step in range(config.student_steps):
        clean, anomalous, _ = batches.next()
        target = teacher(clean)
        pred = student(anomalous if config.den else clean)
        loss = distillation_loss(target, pred, config.eps)
        losses.append(_check_finite(loss, "student", step, losses))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if (step + 1) % config.log_every == 0:
            log.info("student step %d/%d loss %.4f", step + 1, config.student_steps, losses[-1])
    if state_checksum(teacher) != teacher_sum:
        raise TrainingError("teacher parameters changed during student training")
    return student.eval(), losses


def train_segmentation(
    config: TrainConfig, data: TrainData, teacher: TeacherNet, student: nn.Module, head: SegmentationHead | None = None
) -> tuple[SegmentationHead, list[float]]:
    freeze(student)
    frozen = (state_checksum(teacher), state_checksum(student))
    if head is None:
        torch.manual_seed(config.seed + 1)
        head = SegmentationHead(fused_channels(config.fusion_mode), config.seg_width)
    head.train()
    opt, sched = _optimizer(head.parameters(), config, config.seg_lr, config.seg_steps)
    batches = SyntheticBatches(data, config, stream=2)
    losses: list[float] = []
    for step in range(config.seg_steps):
        _, anomalous, masks = batches.next()
        with torch.no_grad():
            x_hat = build_fused_input(teacher(anomalous), student(anomalous), config.fusion_mode, config.eps)
        y_hat = head(x_hat)
        target = downsample_masks(masks, tuple(y_hat.shape[-2:]))
        loss = segmentation_loss(y_hat, target, config.gamma, config.eps)
        losses.append(_check_finite(loss, "segmentation", step, losses))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if (step + 1) % config.log_every == 0:
            log.info("segmentation step %d/%d loss %.4f", step + 1, config.seg_steps, losses[-1])
    if (state_checksum(teacher), state_checksum(student)) != frozen:
        raise TrainingError("teacher or student parameters changed during segmentation training")
    return head.eval(), losses


def run_dir_for(config: TrainConfig) -> Path:
    return Path(config.run_root) / config.config_hash()


def load_student(config: TrainConfig, run_dir: Path, force: bool = False) -> nn.Module:
    blob = load_checkpoint(run_dir / STUDENT_CKPT, config.config_hash(), force)
    student = build_student(config.ed)
    student.load_state_dict(blob["state_dict"])
    return freeze(student)


def load_head(config: TrainConfig, run_dir: Path, force: bool = False) -> SegmentationHead:
    blob = load_checkpoint(run_dir / SEG_CKPT, config.config_hash(), force)
    head = SegmentationHead(fused_channels(config.fusion_mode), config.seg_width)
    head.load_state_dict(blob["state_dict"])
    return freeze(head)


def train(
    config: TrainConfig, stage: str = "both", data: TrainData | None = None, run_dir: str | Path | None = None
) -> RunRecord:
    """Train the requested stage(s) and write checkpoints plus a JSON record to the run directory."""
    if stage not in ("student", "seg", "both"):
        raise ValueError(f"stage must be student, seg or both, got {stage!r}")
    config.validate()
    set_determinism(config)
    run_dir = Path(run_dir) if run_dir is not None else run_dir_for(config)
    chash = config.config_hash()
    log.info("run %s seed %d flags den=%s ed=%s seg=%s", chash, config.seed, *config.flags)
    data = data or TrainData.from_config(config)
    teacher = build_teacher(config)
    record = RunRecord(chash, config.seed, dict(zip(("den", "ed", "seg"), config.flags)))
    record_path = run_dir / RECORD
    if stage == "seg" and record_path.is_file():
        record.student_losses = json.loads(record_path.read_text()).get("student_losses", [])
    record.checksums["teacher"] = state_checksum(teacher)

    if stage in ("student", "both"):
        t0 = time.perf_counter()
        student, record.student_losses = train_student(config, data, teacher)
        record.wall_clock["student"] = time.perf_counter() - t0
        path = save_checkpoint(run_dir / STUDENT_CKPT, student, chash, "student", encoder_decoder=config.ed)
        record.checkpoints["student"] = str(path)
    else:
        student = load_student(config, run_dir)
    record.checksums["student"] = state_checksum(student)

    if stage in ("seg", "both") and config.seg:
        t0 = time.perf_counter()
        head, record.seg_losses = train_segmentation(config, data, teacher, student)
        record.wall_clock["seg"] = time.perf_counter() - t0
        path = save_checkpoint(run_dir / SEG_CKPT, head, chash, "seg", fusion_mode=config.fusion_mode)
        record.checkpoints["seg"] = str(path)
        record.checksums["seg"] = state_checksum(head)
    (run_dir / "config.cfg").parent.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(config.to_text())
    record.write(record_path)
    return record
