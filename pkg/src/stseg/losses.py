"""Distillation and segmentation losses.

Feature tensors are batched ``(N, C, H, W)``; score maps and masks are
``(N, 1, H, W)`` or ``(N, H, W)``. Every reduction is a plain mean over batch and
spatial positions, so per-image values are recovered with ``N = 1``.
"""
from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor

EPS = 1e-8


def similarity_map(f_t: Tensor, f_s: Tensor, eps: float = EPS) -> Tensor:
    """Elementwise product of per-location L2-normalized features.

    Summing the result over channels gives the cosine similarity at each position.
    """
    if f_t.shape != f_s.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_t.shape)} vs {tuple(f_s.shape)}")
    n_t = f_t.norm(dim=1, keepdim=True).clamp_min(eps)
    n_s = f_s.norm(dim=1, keepdim=True).clamp_min(eps)
    return (f_t / n_t) * (f_s / n_s)


def distance_map(x: Tensor) -> Tensor:
    """``1 - cosine`` per location, shape (N, H, W)."""
    return 1.0 - x.sum(dim=1)


def _check_pyramids(teacher_pyr: Sequence[Tensor], student_pyr: Sequence[Tensor]) -> None:
    if len(teacher_pyr) != len(student_pyr):
        raise ValueError(f"pyramid depth mismatch: {len(teacher_pyr)} vs {len(student_pyr)}")
    for k, (t, s) in enumerate(zip(teacher_pyr, student_pyr), start=1):
        if t.shape != s.shape:
            raise ValueError(f"level {k} shape mismatch: {tuple(t.shape)} vs {tuple(s.shape)}")


def distillation_loss(teacher_pyr: Sequence[Tensor], student_pyr: Sequence[Tensor], eps: float = EPS) -> Tensor:
    """Sum over levels of the spatially averaged cosine distance; lies in [0, 2 * levels]."""
    _check_pyramids(teacher_pyr, student_pyr)
    total = teacher_pyr[0].new_zeros(())
    for f_t, f_s in zip(teacher_pyr, student_pyr):
        total = total + distance_map(similarity_map(f_t, f_s, eps)).mean()
    return total


def _match(y_hat: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
    if y_hat.shape != mask.shape:
        raise ValueError(f"prediction {tuple(y_hat.shape)} and mask {tuple(mask.shape)} shapes differ")
    return y_hat, mask.to(y_hat.dtype)


def focal_loss(y_hat: Tensor, mask: Tensor, gamma: float = 4.0, eps: float = EPS) -> Tensor:
    y_hat, mask = _match(y_hat, mask)
    y = y_hat.clamp(eps, 1.0 - eps)
    p = mask * y + (1.0 - mask) * (1.0 - y)
    return -((1.0 - p).pow(gamma) * torch.log(p)).mean()


def l1_loss(y_hat: Tensor, mask: Tensor) -> Tensor:
    y_hat, mask = _match(y_hat, mask)
    return (mask - y_hat).abs().mean()


def segmentation_loss(y_hat: Tensor, mask: Tensor, gamma: float = 4.0, eps: float = EPS) -> Tensor:
    return focal_loss(y_hat, mask, gamma, eps) + l1_loss(y_hat, mask)
