"""Adapting-area prediction: where generation may write, and its supervision.

Ground truth differs per task. For reenactment the model must be free to move
the whole head, so the target is the dilated union of the source and target
head regions (hair, face, neck). For swapping only the inner face changes, so
the target is the dilated face region of the target frame. Dilation uses a
square (Chebyshev) structuring element of the given radius.

The predictor itself is a small conv head with 6 input channels (frame RGB +
landmark-image RGB) and 1 output channel, final layer zero-initialized so an
untrained head predicts exactly 0.5 everywhere after the sigmoid.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigurationError, ContractViolationError
from .torch_utils import seed_parameters, zero_module


class Task(enum.Enum):
    REENACT = "reenact"
    SWAP = "swap"


@dataclass(frozen=True)
class AdaptingMask:
    """Soft mask in [0, 1] tagged with the task it was produced for."""

    values: np.ndarray  # (H, W) float32
    task: Task

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 2:
            raise ContractViolationError(f"mask must be (H, W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError("mask contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractViolationError(
                f"mask values must lie in [0, 1], got range [{arr.min()}, {arr.max()}]"
            )
        object.__setattr__(self, "values", arr)

    def binarized(self) -> np.ndarray:
        """Threshold at 0.5 (>= 0.5 is foreground), float32 {0, 1}."""
        return (self.values >= 0.5).astype(np.float32)


def _as_binary_mask(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ContractViolationError(f"{name} must be (H, W), got shape {arr.shape}")
    if arr.dtype != bool:
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise ContractViolationError(f"{name} must be binary, found values {vals[:8]}")
    return arr.astype(bool)


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1) x (2r+1) square structuring element.

    radius 0 returns an unchanged copy. Output dtype matches a float {0, 1}
    mask convention.
    """
    arr = _as_binary_mask(mask, "mask")
    if radius < 0:
        raise ContractViolationError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0 or not arr.any():
        return arr.astype(np.float32)
    struct = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(arr, structure=struct).astype(np.float32)


def default_dilation_radius(resolution: int) -> int:
    """3% of the image side, rounded, floored at 1."""
    return max(1, int(round(0.03 * resolution)))


def build_gt_mask_reenact(
    source_head: np.ndarray, target_head: np.ndarray, radius: int
) -> AdaptingMask:
    """dilate(source head union target head): full head motion must fit inside."""
    s = _as_binary_mask(source_head, "source head mask")
    t = _as_binary_mask(target_head, "target head mask")
    if s.shape != t.shape:
        raise ContractViolationError(f"head mask shapes differ: {s.shape} vs {t.shape}")
    return AdaptingMask(values=dilate_mask(np.logical_or(s, t), radius), task=Task.REENACT)


def build_gt_mask_swap(target_face: np.ndarray, radius: int) -> AdaptingMask:
    """dilate(target face region): only the inner face is replaced."""
    f = _as_binary_mask(target_face, "target face mask")
    return AdaptingMask(values=dilate_mask(f, radius), task=Task.SWAP)


class SegmentationHead(nn.Module):
    """6-in 1-out conv head predicting the adapting area.

    Input is the channel concatenation of the conditioning frame and the
    landmark image, both (3, H, W) in [0, 1]. One stride-2 stage gives a
    little context; the logit layer is zero-initialized so the untrained
    prediction is sigmoid(0) = 0.5 everywhere.
    """

    def __init__(self, task: Task, hidden: int = 16, seed: int = 0):
        super().__init__()
        self.task = task
        self.stem = nn.Sequential(
            nn.Conv2d(6, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Sequential(
            nn.Conv2d(hidden * 2, hidden, 3, padding=1),
            nn.SiLU(),
        )
        self.logit = zero_module(nn.Conv2d(hidden, 1, 3, padding=1))
        seed_parameters(self, seed)
        zero_module(self.logit)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 6:
            raise ContractViolationError(f"segmentation input must be (B, 6, H, W), got {tuple(x.shape)}")
        h = self.stem(x)
        h = F.interpolate(h, size=x.shape[-2:], mode="nearest")
        return self.logit(self.head(h))


def _stack_input(image: np.ndarray, landmark_image: np.ndarray) -> torch.Tensor:
    img = np.asarray(image, dtype=np.float32)
    lmk = np.asarray(landmark_image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolationError(f"image must be (H, W, 3), got {img.shape}")
    if lmk.shape != img.shape:
        raise ContractViolationError(
            f"landmark image shape {lmk.shape} must match frame shape {img.shape}"
        )
    x = np.concatenate([img, lmk], axis=2)  # (H, W, 6)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None]


def predict_adapting_area(
    head: SegmentationHead, image: np.ndarray, landmark_image: np.ndarray
) -> AdaptingMask:
    """Run the predictor on one frame + landmark image pair."""
    was_training = head.training
    head.eval()
    try:
        with torch.no_grad():
            logits = head(_stack_input(image, landmark_image))
    finally:
        if was_training:
            head.train()
    probs = torch.sigmoid(logits)[0, 0].numpy().astype(np.float32)
    return AdaptingMask(values=np.clip(probs, 0.0, 1.0), task=head.task)


def train_area_predictor(
    head: SegmentationHead,
    dataset: Sequence[Tuple[np.ndarray, np.ndarray, AdaptingMask]],
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 4,
    seed: int = 0,
) -> List[float]:
    """Supervised BCE training on (image, landmark_image, gt mask) triples.

    Returns the per-step loss trace. Deterministic for a fixed seed: batches
    are drawn from a numpy Generator seeded here and nothing else is random.
    """
    if len(dataset) == 0:
        raise ConfigurationError("area predictor dataset is empty")
    if steps < 0:
        raise ContractViolationError(f"steps must be >= 0, got {steps}")
    for image, landmark_image, gt in dataset:
        if gt.task != head.task:
            raise ContractViolationError(
                f"dataset mask task {gt.task} does not match predictor task {head.task}"
            )

    inputs = [_stack_input(img, lmk)[0] for img, lmk, _ in dataset]
    targets = [torch.from_numpy(gt.values[None].copy()) for _, _, gt in dataset]
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    head.train()
    losses: List[float] = []
    for _ in range(steps):
        idx = rng.integers(0, len(dataset), size=min(batch_size, len(dataset)))
        x = torch.stack([inputs[i] for i in idx])
        y = torch.stack([targets[i] for i in idx])
        logits = head(x)
        loss = F.binary_cross_entropy_with_logits(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    head.eval()
    return losses
