"""Frozen denoiser stand-in, noise schedule, guidance, and the DDIM sampler.

The backbone plays the role of a large pretrained latent-diffusion denoiser:
it is built once from (config, seed), then frozen; adapters only ever talk to
it through cross-attention context and per-block residuals. To make a frozen
random-weight network behave like something pretrained, its epsilon output is
split into an analytic part anchored to the schedule it was built with and a
learned feature readout g from a small U-Net (two encoder scales, mid-block
cross-attention over the token context, skip decoder):

    eps_hat = (c1_t - c2_t) * x_t + g
    c1_t = 1 / sqrt(1 - ab_t),  c2_t = sqrt(ab_t / (1 - ab_t))

The analytic term is the exact noise prediction of the pass-through prior
x0 ~ x_t; substituting the true x_t shows the readout's regression target is
g* = sqrt(ab_t) * eps, which stays order-one at every timestep. Without the
split, the target would carry a c2_t factor that exceeds 1e3 near t = 0 and
its gradient noise would drown the optimizer. The implied clean-image
prediction is x0_hat = x_t - sqrt((1 - ab_t) / ab_t) * g, which is what the
DDIM update recovers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, ContractViolationError, SamplingError
from .mappers import TokenSequence, concat_context
from .attribute import ControlBranch, SpatialControl
from .torch_utils import seed_parameters


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels alpha_bar[t], t = 0..T-1.

    Values lie in [0, 1] and are monotone non-increasing. The sampler's
    "before time 0" boundary is alpha_bar = 1 by convention (queried as
    t = -1). DDIM additionally needs alpha_bar > 0 at every queried step;
    that is checked where the division happens.
    """

    alpha_bar: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.alpha_bar, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ContractViolationError(f"alpha_bar must be a non-empty vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError("alpha_bar contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractViolationError(
                f"alpha_bar must lie in [0, 1], got range [{arr.min()}, {arr.max()}]"
            )
        if np.any(np.diff(arr) > 0):
            raise ContractViolationError("alpha_bar must be monotone non-increasing")
        object.__setattr__(self, "alpha_bar", arr)

    @property
    def timesteps(self) -> int:
        return self.alpha_bar.shape[0]

    @classmethod
    def linear(cls, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if timesteps <= 0:
            raise ContractViolationError(f"timesteps must be positive, got {timesteps}")
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        if betas.min() <= 0.0 or betas.max() >= 1.0:
            raise ContractViolationError("betas must lie in (0, 1)")
        return cls(alpha_bar=np.cumprod(1.0 - betas))

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar[t], with t = -1 denoting the clean boundary (1.0)."""
        if t == -1:
            return 1.0
        if not (0 <= t < self.timesteps):
            raise SamplingError(f"timestep {t} outside [0, {self.timesteps})")
        return float(self.alpha_bar[t])


def add_noise(
    x0: torch.Tensor, eps: torch.Tensor, t: int | torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """q(x_t | x_0): sqrt(ab) * x0 + sqrt(1 - ab) * eps.

    t may be a python int (applied to the whole batch) or a (B,) tensor of
    per-example timesteps. alpha_bar = 1 returns x0 bitwise, 0 returns eps
    bitwise (the sqrt factors are exactly 1 and 0).
    """
    if x0.shape != eps.shape:
        raise ContractViolationError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if isinstance(t, int):
        if not (0 <= t < schedule.timesteps):
            raise ContractViolationError(f"timestep {t} outside [0, {schedule.timesteps})")
        ab = schedule.alpha_bar[t]
        sa = torch.tensor(math.sqrt(ab), dtype=x0.dtype)
        sb = torch.tensor(math.sqrt(1.0 - ab), dtype=x0.dtype)
        return sa * x0 + sb * eps
    tt = t.to(torch.long)
    if tt.ndim != 1 or tt.shape[0] != x0.shape[0]:
        raise ContractViolationError(f"per-example t must be (B,), got {tuple(tt.shape)}")
    if int(tt.min()) < 0 or int(tt.max()) >= schedule.timesteps:
        raise ContractViolationError("per-example timesteps outside schedule range")
    ab = torch.from_numpy(schedule.alpha_bar)[tt]
    shape = (x0.shape[0],) + (1,) * (x0.ndim - 1)
    sa = torch.sqrt(ab).to(x0.dtype).reshape(shape)
    sb = torch.sqrt(1.0 - ab).to(x0.dtype).reshape(shape)
    return sa * x0 + sb * eps


def cfg_combine(cond: torch.Tensor, uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance: uncond + scale * (cond - uncond).

    scale 1 short-circuits to cond and scale 0 to uncond, so those endpoints
    are bitwise exact rather than merely algebraically equal (a sampler at
    scale 1 must be bit-independent of whatever the negative path computed).
    """
    if cond.shape != uncond.shape:
        raise ContractViolationError(
            f"cond shape {tuple(cond.shape)} != uncond shape {tuple(uncond.shape)}"
        )
    if scale == 1.0:
        return cond
    if scale == 0.0:
        return uncond
    return uncond + scale * (cond - uncond)


# ---------------------------------------------------------------------------
# latent codec
# ---------------------------------------------------------------------------

class LatentCodec(Protocol):
    latent_channels: int

    def encode(self, image: np.ndarray) -> torch.Tensor: ...

    def decode(self, latent: torch.Tensor) -> np.ndarray: ...


class PixelSpaceCodec:
    """Pixel-space latents: (H, W, 3) in [0, 1] <-> (3, H, W) in [-1, 1].

    decode inverts encode up to float32 rounding (at most 1 ulp, from the
    subtract-1 step on small pixels). Callers that need bit-exact pixels
    (background preservation) blend original images and never round-trip
    them through the codec.
    """

    latent_channels = 3

    def encode(self, image: np.ndarray) -> torch.Tensor:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ContractViolationError(f"codec input must be (H, W, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError("codec input contains non-finite values")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
        return x * 2.0 - 1.0

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        if latent.ndim != 3 or latent.shape[0] != 3:
            raise ContractViolationError(f"codec latent must be (3, H, W), got {tuple(latent.shape)}")
        x = ((latent.detach() + 1.0) / 2.0).clamp(0.0, 1.0)
        return x.permute(1, 2, 0).contiguous().numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# backbone blocks
# ---------------------------------------------------------------------------

class TimeEmbedding(nn.Module):
    """Sinusoidal timestep features pushed through a 2-layer MLP."""

    def __init__(self, dim: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: int | torch.Tensor, batch: int) -> torch.Tensor:
        if isinstance(t, int):
            tt = torch.full((batch,), float(t))
        else:
            tt = t.to(torch.float32)
            if tt.ndim == 0:
                tt = tt.expand(batch)
            if tt.shape[0] != batch:
                raise ContractViolationError(f"t batch {tt.shape[0]} != latent batch {batch}")
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        ang = tt[:, None] * freqs[None]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
        return self.mlp(emb)


class ResBlock(nn.Module):
    def __init__(self, channels: int, temb_dim: int, groups: int = 8):
        super().__init__()
        g = min(groups, channels)
        self.norm1 = nn.GroupNorm(g, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, channels)
        self.norm2 = nn.GroupNorm(g, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        r = self.conv1(torch.nn.functional.silu(self.norm1(h)))
        r = r + self.temb_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        r = self.conv2(torch.nn.functional.silu(self.norm2(r)))
        return h + r


class SpatialCrossAttention(nn.Module):
    """Single cross-attention from feature-map pixels into the token context.

    Returns the attention result (caller adds it residually). Token context
    may be (S, D) or (B, S, D).
    """

    def __init__(self, channels: int, context_dim: int, heads: int = 4):
        super().__init__()
        if channels % heads != 0:
            raise ContractViolationError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (channels // heads) ** -0.5
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, h: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = h.shape
        if context.ndim == 2:
            context = context[None].expand(b, -1, -1)
        if context.ndim != 3 or context.shape[0] != b:
            raise ContractViolationError(f"context must be (B, S, D), got {tuple(context.shape)}")
        n = self.heads
        q = self.to_q(self.norm(h).flatten(2).transpose(1, 2))
        k = self.to_k(context)
        v = self.to_v(context)
        q = q.reshape(b, hh * ww, n, c // n).transpose(1, 2)
        k = k.reshape(b, context.shape[1], n, c // n).transpose(1, 2)
        v = v.reshape(b, context.shape[1], n, c // n).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, hh * ww, c)
        return self.to_out(out).transpose(1, 2).reshape(b, c, hh, ww)


class ToyDenoiser(nn.Module):
    """Frozen schedule-anchored denoiser (see module docstring for the math).

    Structure: conv_in -> enc1 @ full res -> down -> enc2 @ /2 -> down ->
    mid (res, cross-attn, res) @ /4 -> decoder with skips. Control residuals,
    when given, are [r1 (enc1-shaped), r2 (enc2-shaped), r_mid (mid-shaped)]
    and are added to the skip connections and the mid activations, which is
    the only way anything trainable can steer this network.

    Two structured-init choices make the frozen weights act "pretrained"
    rather than merely random: the output conv is a fixed identity tap on the
    first three decoder channels, and every residual block's second conv is
    damped, so the decoder is a mild perturbation of its skip inputs. The tap
    means the full-resolution residual r1 reaches the feature readout through
    one frozen residual block, so adapters can paint pixel content directly;
    without it, zero-connector residuals would have to invert random
    convolutions and no adapter could reach the fidelity the task needs.
    """

    def __init__(
        self,
        schedule: NoiseSchedule,
        base_channels: int = 32,
        context_dim: int = 768,
        seed: int = 7,
        attn_heads: int = 4,
    ):
        super().__init__()
        c = base_channels
        self.base_channels = c
        self.context_dim = context_dim
        temb_dim = 4 * c
        self.time_mlp = TimeEmbedding(temb_dim)
        self.conv_in = nn.Conv2d(3, c, 3, padding=1)
        self.enc1 = ResBlock(c, temb_dim)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc2 = ResBlock(2 * c, temb_dim)
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * c, temb_dim)
        self.mid_attn = SpatialCrossAttention(2 * c, context_dim, attn_heads)
        self.mid2 = ResBlock(2 * c, temb_dim)
        self.up2 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.dec2 = ResBlock(2 * c, temb_dim)
        self.reduce1 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec1 = ResBlock(c, temb_dim)
        self.conv_out = nn.Conv2d(c, 3, 3, padding=1)
        self.register_buffer("alpha_bar", torch.from_numpy(schedule.alpha_bar.copy()))
        seed_parameters(self, seed)
        with torch.no_grad():
            for block in (self.enc1, self.enc2, self.mid1, self.mid2, self.dec2, self.dec1):
                block.conv2.weight.mul_(0.25)
            self.conv_out.weight.zero_()
            self.conv_out.bias.zero_()
            for ch in range(3):
                self.conv_out.weight[ch, ch, 1, 1] = 1.0
        self.requires_grad_(False)
        self.eval()

    def feature_readout(
        self,
        x_t: torch.Tensor,
        t: int | torch.Tensor,
        context: Optional[torch.Tensor] = None,
        residuals: Optional[Sequence[torch.Tensor]] = None,
    ) -> torch.Tensor:
        """The learned half of eps_hat; its regression target is sqrt(ab)*eps."""
        if x_t.ndim != 4 or x_t.shape[1] != 3:
            raise ContractViolationError(f"latent must be (B, 3, H, W), got {tuple(x_t.shape)}")
        if x_t.shape[-2] % 4 or x_t.shape[-1] % 4:
            raise ContractViolationError(f"latent spatial size must be divisible by 4, got {tuple(x_t.shape[-2:])}")
        b = x_t.shape[0]
        temb = self.time_mlp(t, b)
        h1 = self.enc1(self.conv_in(x_t), temb)
        h2 = self.enc2(self.down1(h1), temb)
        m = self.mid1(self.down2(h2), temb)
        if context is not None:
            m = m + self.mid_attn(m, context)
        m = self.mid2(m, temb)
        if residuals is not None:
            r1, r2, rm = residuals
            if r1.shape != h1.shape or r2.shape != h2.shape or rm.shape != m.shape:
                raise ContractViolationError("control residual shapes do not match block activations")
            h1 = h1 + r1
            h2 = h2 + r2
            m = m + rm
        d = torch.nn.functional.interpolate(m, scale_factor=2, mode="nearest")
        d = self.dec2(self.up2(d) + h2, temb)
        d = torch.nn.functional.interpolate(d, scale_factor=2, mode="nearest")
        d = self.dec1(self.reduce1(d) + h1, temb)
        return self.conv_out(d)

    def _coeffs(self, t: int | torch.Tensor, batch: int, dtype: torch.dtype):
        if isinstance(t, int):
            tt = torch.full((batch,), t, dtype=torch.long)
        else:
            tt = t.to(torch.long)
            if tt.ndim == 0:
                tt = tt.expand(batch)
        if int(tt.min()) < 0 or int(tt.max()) >= self.alpha_bar.shape[0]:
            raise SamplingError(f"timestep outside schedule range [0, {self.alpha_bar.shape[0]})")
        ab = self.alpha_bar[tt]
        rem = 1.0 - ab
        if bool((rem <= 0).any()):
            raise SamplingError("backbone queried at alpha_bar == 1 (no noise to predict)")
        c1 = (1.0 / torch.sqrt(rem)).to(dtype).reshape(batch, 1, 1, 1)
        c2 = torch.sqrt(ab / rem).to(dtype).reshape(batch, 1, 1, 1)
        return c1, c2

    def forward(
        self,
        x_t: torch.Tensor,
        t: int | torch.Tensor,
        context: Optional[torch.Tensor] = None,
        residuals: Optional[Sequence[torch.Tensor]] = None,
    ) -> torch.Tensor:
        g = self.feature_readout(x_t, t, context, residuals)
        c1, c2 = self._coeffs(t, x_t.shape[0], x_t.dtype)
        return (c1 - c2) * x_t + g


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleConditions:
    """Everything one guided sampling run is conditioned on."""

    id_tokens: TokenSequence
    attr_tokens: TokenSequence
    neg_id_tokens: TokenSequence
    neg_attr_tokens: TokenSequence
    spatial: SpatialControl


def spatial_to_tensor(spatial: SpatialControl) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(spatial.image.transpose(2, 0, 1)))[None]


def ddim_timesteps(total: int, steps: int) -> List[int]:
    """Descending evenly spaced timestep grid, always ending at 0."""
    if steps <= 0:
        raise ConfigurationError(f"sampling steps must be positive, got {steps}")
    grid = np.unique(np.round(np.linspace(0, total - 1, min(steps, total))).astype(int))
    return [int(v) for v in grid[::-1]]


def ddim_update(
    x_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM move from t to t_prev (t_prev may be -1)."""
    ab_t = schedule.alpha_bar_at(t)
    ab_p = schedule.alpha_bar_at(t_prev)
    if ab_t <= 0.0:
        raise SamplingError(f"DDIM requires alpha_bar > 0 at t={t}")
    x0 = (x_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_p) * x0 + math.sqrt(1.0 - ab_p) * eps


def denoise_step(
    backbone: ToyDenoiser,
    branch: Optional[ControlBranch],
    x_t: torch.Tensor,
    t: int,
    t_prev: int,
    conditions: SampleConditions,
    schedule: NoiseSchedule,
    guidance_scale: float,
) -> torch.Tensor:
    """One guided DDIM step: conditional (and, if needed, negative) forward,
    CFG combine, then the x0-form update. Raises on non-finite state."""
    spatial = spatial_to_tensor(conditions.spatial)
    pos_ctx = concat_context(conditions.id_tokens, conditions.attr_tokens)[None]
    residuals = branch(x_t, t, pos_ctx, spatial) if branch is not None else None
    eps_pos = backbone(x_t, t, pos_ctx, residuals)
    if guidance_scale == 1.0:
        eps = eps_pos
    else:
        neg_ctx = concat_context(conditions.neg_id_tokens, conditions.neg_attr_tokens)[None]
        neg_res = branch(x_t, t, neg_ctx, spatial) if branch is not None else None
        eps_neg = backbone(x_t, t, neg_ctx, neg_res)
        eps = cfg_combine(eps_pos, eps_neg, guidance_scale)
    x_prev = ddim_update(x_t, eps, t, t_prev, schedule)
    if not torch.isfinite(x_prev).all():
        raise SamplingError(f"sampler state became non-finite at t={t}")
    return x_prev


def sample(
    backbone: ToyDenoiser,
    branch: Optional[ControlBranch],
    conditions: SampleConditions,
    schedule: NoiseSchedule,
    codec: LatentCodec,
    resolution: int,
    steps: int = 20,
    guidance_scale: float = 3.5,
    seed: int = 0,
) -> np.ndarray:
    """Full DDIM run from seeded Gaussian noise down to a decoded image.

    Deterministic: the only randomness is the initial latent, drawn from a
    numpy Generator seeded with `seed`. guidance_scale 1 never evaluates the
    negative context at all, so the output is bit-independent of it.
    """
    if guidance_scale <= 0:
        raise ConfigurationError(f"guidance scale must be positive, got {guidance_scale}")
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(
        rng.standard_normal((1, 3, resolution, resolution)).astype(np.float32)
    )
    grid = ddim_timesteps(schedule.timesteps, steps)
    with torch.no_grad():
        for i, t in enumerate(grid):
            t_prev = grid[i + 1] if i + 1 < len(grid) else -1
            x = denoise_step(backbone, branch, x, t, t_prev, conditions, schedule, guidance_scale)
    return codec.decode(x[0])
