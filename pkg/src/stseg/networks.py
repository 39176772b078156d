"""Teacher and student feature extractors.

The teacher is an 18-layer residual network cut after its third stage and kept
frozen. The denoising student is a full 4-stage residual encoder followed by a
mirrored decoder in which every strided downsampling is replaced by bilinear
upsampling; its last three decoder blocks are shape-matched to the teacher's
pyramid. The vanilla student (ablation) copies the teacher architecture.

Pyramids are tuples of three tensors at strides 4, 8 and 16 with 64, 128 and
256 channels.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.models import resnet18

FeaturePyramid = tuple[Tensor, Tensor, Tensor]

PYRAMID_CHANNELS = (64, 128, 256)
PYRAMID_STRIDES = (4, 8, 16)
INPUT_MULTIPLE = 32


class CheckpointError(RuntimeError):
    """Raised for unreadable, mismatched or incompatible checkpoints."""


def _check_input(image: Tensor) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) input, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
        raise ValueError(f"input size {(h, w)} must be divisible by {INPUT_MULTIPLE}")


class _TruncatedResNet(nn.Module):
    """Stem plus the first three residual stages of resnet18."""

    def __init__(self):
        super().__init__()
        base = resnet18(weights=None)
        self.conv1, self.bn1, self.relu, self.maxpool = base.conv1, base.bn1, base.relu, base.maxpool
        self.layer1, self.layer2, self.layer3 = base.layer1, base.layer2, base.layer3

    def forward(self, x: Tensor) -> FeaturePyramid:
        _check_input(x)
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        return f1, f2, f3


class TeacherNet(_TruncatedResNet):
    """Frozen feature extractor. Stays in eval mode whatever ``train()`` is asked."""

    def __init__(self):
        super().__init__()
        self.weights_loaded = False
        self.weights_source = ""
        self.freeze()

    def freeze(self) -> "TeacherNet":
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True) -> "TeacherNet":
        return super().train(False)

    def forward(self, x: Tensor) -> FeaturePyramid:
        if not self.weights_loaded:
            raise RuntimeError("teacher weights are not loaded; use load_pretrained_teacher or random_teacher")
        with torch.no_grad():
            return super().forward(x)


class VanillaStudent(_TruncatedResNet):
    """Randomly initialised copy of the teacher architecture (ablation arm without encoder-decoder)."""

    encoder_decoder = False


def _conv3x3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1, bias=False)


class UpBlock(nn.Module):
    """Basic residual block whose optional stride-2 step is a bilinear x2 upsampling."""

    def __init__(self, cin: int, cout: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv1 = _conv3x3(cin, cout)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = _conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x: Tensor) -> Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class DenoisingStudent(nn.Module):
    """Encoder-decoder student.

    Decoder schedule (channels @ stride): 512@32 -> d4 -> 256@16 -> d3 -> 256@16
    -> d2 -> 128@8 -> d1 -> 64@4. The outputs of d3, d2 and d1 form the pyramid.
    There are no skip connections; everything passes through the stride-32 code.
    """

    encoder_decoder = True

    def __init__(self):
        super().__init__()
        base = resnet18(weights=None)
        self.encoder = nn.Sequential(
            base.conv1, base.bn1, base.relu, base.maxpool, base.layer1, base.layer2, base.layer3, base.layer4
        )
        self.d4 = UpBlock(512, 256, upsample=True)
        self.d3 = UpBlock(256, 256, upsample=False)
        self.d2 = UpBlock(256, 128, upsample=True)
        self.d1 = UpBlock(128, 64, upsample=True)

    def forward(self, x: Tensor) -> FeaturePyramid:
        _check_input(x)
        z = self.d4(self.encoder(x))
        f3 = self.d3(z)
        f2 = self.d2(f3)
        f1 = self.d1(f2)
        return f1, f2, f3


def build_student(encoder_decoder: bool = True) -> nn.Module:
    return DenoisingStudent() if encoder_decoder else VanillaStudent()


def build_vanilla_student() -> VanillaStudent:
    return VanillaStudent()


def teacher_forward(teacher: TeacherNet, image: Tensor) -> FeaturePyramid:
    return teacher(image)


def student_forward(student: nn.Module, image: Tensor) -> FeaturePyramid:
    return student(image)


def random_teacher(seed: int) -> TeacherNet:
    """Teacher with fixed-seed random weights, for hermetic runs without a pretrained checkpoint."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        teacher = TeacherNet()
    teacher.weights_loaded = True
    teacher.weights_source = f"random:{seed}"
    return teacher


def load_pretrained_teacher(path: str | Path) -> TeacherNet:
    """Load teacher weights from a torchvision-style resnet18 state dict or a saved checkpoint.

    Keys for the fourth stage and the classifier are ignored. Missing, unexpected
    or mis-shaped entries raise :class:`CheckpointError` listing all of them.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"teacher checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    state = blob.get("state_dict", blob) if isinstance(blob, dict) else None
    if not isinstance(state, dict):
        raise CheckpointError(f"{path} does not contain a state dict")
    state = {k.removeprefix("module."): v for k, v in state.items()}
    state = {k: v for k, v in state.items() if not k.startswith(("layer4.", "fc."))}

    teacher = TeacherNet()
    expected = teacher.state_dict()
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    bad_shape = sorted(
        f"{k}: {tuple(state[k].shape)} != {tuple(expected[k].shape)}"
        for k in set(state) & set(expected)
        if state[k].shape != expected[k].shape
    )
    if missing or unexpected or bad_shape:
        parts = []
        if missing:
            parts.append(f"missing keys {missing}")
        if unexpected:
            parts.append(f"unexpected keys {unexpected}")
        if bad_shape:
            parts.append(f"shape mismatches {bad_shape}")
        raise CheckpointError(f"teacher checkpoint {path} does not match architecture: " + "; ".join(parts))
    teacher.load_state_dict(state)
    teacher.freeze()
    teacher.weights_loaded = True
    teacher.weights_source = str(path)
    return teacher


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, module: nn.Module, config_hash: str, kind: str, **extra: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": kind, "config_hash": config_hash, "state_dict": module.state_dict(), **extra}, path)
    return path


def load_checkpoint(path: str | Path, config_hash: str | None = None, force: bool = False) -> dict[str, Any]:
    """Read a checkpoint container, refusing a config-hash mismatch unless ``force``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or "state_dict" not in blob:
        raise CheckpointError(f"{path} is not a checkpoint container")
    stored = blob.get("config_hash")
    if config_hash is not None and stored != config_hash and not force:
        raise CheckpointError(f"{path} was written for config {stored}, current config is {config_hash}")
    return blob
