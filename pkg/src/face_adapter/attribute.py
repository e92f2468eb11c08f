"""Attribute and structure conditioning.

Three pieces live here because they condition the same thing (everything
about the output that is *not* identity):

  - the spatial control image: masked background + rendered landmarks
  - attribute embeddings from a vision encoder (1 global + 256 patch tokens)
    and their mapper to token space
  - the control branch: a trainable copy of the frozen denoiser's encoder and
    mid blocks whose per-block residuals are injected back through
    zero-initialized connectors, ControlNet style
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolationError, ExtractionError
from .masks import AdaptingMask, Task
from .mappers import TokenKind, TokenMapper, TokenSequence, null_tokens
from .torch_utils import seed_parameters, zero_module


@dataclass(frozen=True)
class SpatialControl:
    """The composed control image handed to the control branch."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    task: Task

    def __post_init__(self):
        arr = np.asarray(self.image, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ContractViolationError(f"spatial control must be (H, W, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError("spatial control contains non-finite values")
        object.__setattr__(self, "image", arr)


def compose_spatial_control(
    background: np.ndarray, mask: AdaptingMask, landmark_image: np.ndarray
) -> SpatialControl:
    """background * (1 - mask) with landmark pixels reading through exactly.

    The mask is binarized at 0.5 first. Wherever any landmark channel is lit
    the background contribution is zeroed, so the dot color arrives exactly as
    rendered; wherever mask and landmarks are both absent the background pixel
    passes through bit-exactly. Output is clipped to [0, 1].
    """
    bg = np.asarray(background, dtype=np.float32)
    lmk = np.asarray(landmark_image, dtype=np.float32)
    if bg.ndim != 3 or bg.shape[2] != 3:
        raise ContractViolationError(f"background must be (H, W, 3), got {bg.shape}")
    if lmk.shape != bg.shape:
        raise ContractViolationError(
            f"landmark image shape {lmk.shape} must match background shape {bg.shape}"
        )
    if mask.values.shape != bg.shape[:2]:
        raise ContractViolationError(
            f"mask shape {mask.values.shape} must match image shape {bg.shape[:2]}"
        )
    m = mask.binarized()
    lit = (lmk > 0.0).any(axis=2)
    base = bg * (1.0 - m)[:, :, None]
    base[lit] = 0.0
    out = np.clip(base + lmk, 0.0, 1.0).astype(np.float32)
    return SpatialControl(image=out, task=mask.task)


@dataclass(frozen=True)
class AttributeEmbeddings:
    """Vision-encoder features: row 0 is the global token, rows 1..256 patches."""

    features: torch.Tensor  # (257, D) or (1 + P, D)

    def __post_init__(self):
        if not isinstance(self.features, torch.Tensor) or self.features.ndim != 2:
            raise ContractViolationError("attribute features must be a 2-D torch tensor")
        if self.features.shape[0] < 2:
            raise ContractViolationError("attribute features need a global token plus patches")


class ToyVisionEncoder(nn.Module):
    """Patch embedder standing in for a large pretrained vision encoder.

    Resizes to a fixed input, splits into a 16 x 16 patch grid, projects each
    patch linearly, and prepends the patch mean as the global token: output
    (257, dim). Whether it trains alongside the adapters is the caller's
    choice (the fine-tune flag in the run config).
    """

    def __init__(self, dim: int = 64, input_size: int = 64, grid: int = 16, seed: int = 202):
        super().__init__()
        if input_size % grid != 0:
            raise ContractViolationError(f"input size {input_size} not divisible by grid {grid}")
        self.dim = dim
        self.input_size = input_size
        self.grid = grid
        self.patch = input_size // grid
        self.proj = nn.Linear(self.patch * self.patch * 3, dim)
        seed_parameters(self, seed)

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid + 1

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ContractViolationError(f"vision input must be (B, 3, H, W), got {tuple(image.shape)}")
        if image.shape[-2:] != (self.input_size, self.input_size):
            image = F.interpolate(image, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        b = image.shape[0]
        p = self.patch
        x = image.reshape(b, 3, self.grid, p, self.grid, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, self.grid * self.grid, 3 * p * p)
        patches = self.proj(x)  # (B, 256, dim)
        global_tok = patches.mean(dim=1, keepdim=True)
        return torch.cat([global_tok, patches], dim=1)


def extract_attribute_embeddings(encoder: ToyVisionEncoder, template: np.ndarray) -> AttributeEmbeddings:
    """Encode the attribute template frame.

    Runs inside the autograd graph when the encoder is in training mode (the
    fine-tune path); otherwise under no_grad.
    """
    arr = np.asarray(template, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ExtractionError(f"attribute template must be (H, W, 3), got shape {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    if encoder.training:
        feats = encoder(x)[0]
    else:
        with torch.no_grad():
            feats = encoder(x)[0]
    if not torch.isfinite(feats).all():
        raise ExtractionError("vision encoder produced non-finite features")
    return AttributeEmbeddings(features=feats)


def attribute_to_tokens(mapper: TokenMapper, embeddings: AttributeEmbeddings) -> TokenSequence:
    if embeddings.features.shape[1] != mapper.input_dim:
        raise ContractViolationError(
            f"attribute feature dim {embeddings.features.shape[1]} != mapper input dim {mapper.input_dim}"
        )
    out = mapper(embeddings.features[None])
    return TokenSequence(tokens=out[0], kind=TokenKind.ATTRIBUTE)


def null_attribute_tokens(mapper: TokenMapper) -> TokenSequence:
    return null_tokens(mapper, TokenKind.NULL)


class ControlBranch(nn.Module):
    """Trainable copy of the denoiser's encoder+mid path with zero connectors.

    The copy starts from the frozen backbone's weights (that is the point of
    the architecture: it begins as a second opinion from the same model). A
    small hint encoder folds the spatial control image into the input. Each
    tap goes through a zero-initialized 1x1 conv, so a freshly constructed
    branch returns exactly-zero residuals and leaves the backbone's output
    untouched until training moves the connectors.
    """

    def __init__(self, backbone: "DenoiserBackbone", seed: int = 303):  # noqa: F821
        super().__init__()
        self.conv_in = copy.deepcopy(backbone.conv_in)
        self.time_mlp = copy.deepcopy(backbone.time_mlp)
        self.enc1 = copy.deepcopy(backbone.enc1)
        self.down1 = copy.deepcopy(backbone.down1)
        self.enc2 = copy.deepcopy(backbone.enc2)
        self.down2 = copy.deepcopy(backbone.down2)
        self.mid1 = copy.deepcopy(backbone.mid1)
        self.mid_attn = copy.deepcopy(backbone.mid_attn)
        self.mid2 = copy.deepcopy(backbone.mid2)
        c = backbone.base_channels
        self.hint = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, c, 3, padding=1),
        )
        seed_parameters(self.hint, seed)
        zero_module(self.hint[2])
        self.connect1 = zero_module(nn.Conv2d(c, c, 1))
        self.connect2 = zero_module(nn.Conv2d(2 * c, 2 * c, 1))
        self.connect_mid = zero_module(nn.Conv2d(2 * c, 2 * c, 1))
        self.requires_grad_(True)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        context: Optional[torch.Tensor],
        spatial: torch.Tensor,
    ) -> List[torch.Tensor]:
        if spatial.shape[-2:] != x_t.shape[-2:]:
            raise ContractViolationError(
                f"spatial control resolution {tuple(spatial.shape[-2:])} != latent resolution {tuple(x_t.shape[-2:])}"
            )
        temb = self.time_mlp(t, x_t.shape[0])
        h = self.conv_in(x_t) + self.hint(spatial)
        h1 = self.enc1(h, temb)
        h2 = self.enc2(self.down1(h1), temb)
        m = self.mid1(self.down2(h2), temb)
        if context is not None:
            m = m + self.mid_attn(m, context)
        m = self.mid2(m, temb)
        return [self.connect1(h1), self.connect2(h2), self.connect_mid(m)]
