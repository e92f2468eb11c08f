"""Seeded, order-stable parameter init plus small torch helpers.

Everything trainable in this package is initialized through
``seed_parameters`` so that module construction is a pure function of
(architecture, seed). That is what makes checkpoints able to store adapter
weights only and rebuild the frozen backbone from its seed.
"""

from __future__ import annotations

import math
from typing import Iterator, Tuple

import torch
import torch.nn as nn


def zero_module(module: nn.Module) -> nn.Module:
    """Zero all parameters in place (the ControlNet-style connector init)."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def seed_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically reinitialize a module's parameters.

    Weights with ndim >= 2 get LeCun-normal values (std = 1/sqrt(fan_in))
    drawn from a dedicated generator in sorted parameter-name order; biases
    are zeroed and 1-D non-bias parameters (norm gains) set to one. Every
    parameter is touched, so the result is independent of construction order
    and of the global RNG state (torch's own bias init draws from the global
    generator, which would make construction irreproducible across
    processes).
    """
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if p.ndim >= 2:
                fan_in = p.shape[1:].numel()
                std = 1.0 / math.sqrt(max(1, fan_in))
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float32) * std)
            elif "bias" in name.rsplit(".", 1)[-1]:
                nn.init.zeros_(p)
            else:
                nn.init.ones_(p)
    return module


def parameter_version(module: nn.Module) -> Tuple[int, ...]:
    """In-place-mutation fingerprint: optimizer steps bump tensor versions."""
    return tuple(p._version for p in module.parameters())


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def named_tensors(module: nn.Module) -> Iterator[Tuple[str, torch.Tensor]]:
    """Parameters then buffers, with stable names (for audits/fingerprints)."""
    yield from module.named_parameters()
    yield from module.named_buffers()


def state_fingerprint(module: nn.Module) -> bytes:
    """Byte-exact digest of all parameters and buffers (order-stable)."""
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(named_tensors(module), key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.digest()
