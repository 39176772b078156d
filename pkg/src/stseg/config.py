"""Run configuration: a flat ``key = value`` file mapped onto :class:`TrainConfig`.

Lines starting with ``#`` are comments. Values are parsed according to the
field type; booleans accept true/false/yes/no/on/off/1/0 and tuples are
comma-separated. Later sources override earlier ones (file, then CLI ``--set``).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

from .fusion import FUSION_MODES

DATA_ROOT_ENV = "STSEG_DATA_ROOT"

# fields that locate files rather than change results; excluded from the hash
PATH_KEYS = ("data_root", "category", "source_dir", "run_root", "teacher_ckpt")


class ConfigError(ValueError):
    """Invalid configuration key or value."""


@dataclass
class TrainConfig:
    image_size: int = 256
    batch_size: int = 32
    student_steps: int = 3000
    seg_steps: int = 3000
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    student_lr: float = 0.4
    seg_lr: float = 0.1
    lr_schedule: str = "cosine"
    gamma: float = 4.0
    eps: float = 1e-8
    fusion_mode: str = "product-similarity"
    seg_width: int = 256
    den: bool = True
    ed: bool = True
    seg: bool = True
    fusion_aggregation: str = "product"
    seed: int = 0
    teacher_seed: int = 0
    perlin_scales: tuple[int, ...] = (2, 4, 8, 16)
    perlin_threshold: float = 0.5
    mask_area_min: float = 0.01
    mask_area_max: float = 0.5
    normal_prob: float = 0.0
    top_t: int = 100
    iap_k: float = 90.0
    eval_size: int = 256
    norm_mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    norm_std: tuple[float, ...] = (0.229, 0.224, 0.225)
    deterministic: bool = True
    log_every: int = 50
    data_root: str = ""
    category: str = ""
    source_dir: str = ""
    run_root: str = "runs"
    teacher_ckpt: str = ""

    def validate(self) -> "TrainConfig":
        errors = []
        if self.image_size <= 0 or self.image_size % 32:
            errors.append(f"image_size must be a positive multiple of 32, got {self.image_size}")
        for key in ("batch_size", "student_steps", "seg_steps", "seg_width", "top_t", "eval_size", "log_every"):
            if getattr(self, key) <= 0:
                errors.append(f"{key} must be > 0, got {getattr(self, key)}")
        if self.optimizer not in ("sgd", "adam"):
            errors.append(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            errors.append(f"lr_schedule must be cosine or constant, got {self.lr_schedule!r}")
        if self.fusion_mode not in FUSION_MODES:
            errors.append(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.fusion_aggregation not in ("sum", "product"):
            errors.append(f"fusion_aggregation must be sum or product, got {self.fusion_aggregation!r}")
        if not 0.0 <= self.mask_area_min < self.mask_area_max <= 1.0:
            errors.append("mask area bounds must satisfy 0 <= mask_area_min < mask_area_max <= 1")
        if not 0.0 <= self.normal_prob <= 1.0:
            errors.append("normal_prob must lie in [0, 1]")
        if self.top_t > self.eval_size**2 or self.top_t > self.image_size**2:
            errors.append(f"top_t={self.top_t} exceeds the number of map pixels")
        if len(self.norm_mean) != 3 or len(self.norm_std) != 3 or min(self.norm_std) <= 0:
            errors.append("norm_mean and norm_std need three entries with positive std")
        if not 0 < self.iap_k <= 100:
            errors.append("iap_k must lie in (0, 100]")
        if self.gamma < 0 or self.eps <= 0:
            errors.append("gamma must be >= 0 and eps > 0")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return self.den, self.ed, self.seg

    def hashable(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k in PATH_KEYS:
            d.pop(k)
        d.pop("log_every")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.hashable(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, text: str) -> Any:
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if kind == "bool":
        return _parse_bool(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "tuple[int, ...]":
        return tuple(int(x) for x in text.split(",") if x.strip())
    if kind == "tuple[float, ...]":
        return tuple(float(x) for x in text.split(",") if x.strip())
    return text


def parse_pairs(items: Iterable[tuple[str, str]], source: str = "") -> dict[str, Any]:
    out = {}
    for key, value in items:
        key = key.strip().replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}{' in ' + source if source else ''}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    items = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        items.append((key, value))
    return parse_pairs(items, str(path))


def parse_overrides(overrides: Iterable[str]) -> dict[str, Any]:
    items = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        items.append(tuple(item.split("=", 1)))
    return parse_pairs(items, "command line")


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), **values: Any) -> TrainConfig:
    """Defaults < config file < ``--set`` overrides < explicit keyword values."""
    import os

    merged: dict[str, Any] = {}
    env_root = os.environ.get(DATA_ROOT_ENV)
    if env_root:
        merged["data_root"] = env_root
    if path is not None:
        merged.update(read_config_file(path))
    merged.update(parse_overrides(overrides))
    merged.update({k: v for k, v in values.items() if v is not None})
    try:
        return TrainConfig(**merged).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def desk_profile(**changes: Any) -> TrainConfig:
    """Small CPU profile: 64x64 inputs, 500 + 500 steps, a narrower segmentation head."""
    base = TrainConfig(
        image_size=64,
        eval_size=64,
        batch_size=8,
        student_steps=500,
        seg_steps=500,
        seg_width=128,
        top_t=10,
        log_every=100,
    )
    return base.replace(**changes).validate()
