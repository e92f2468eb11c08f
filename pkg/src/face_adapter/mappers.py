"""Learned-query transformer mappers from feature space into token space.

The frozen denoiser's cross-attention expects a fixed-length token sequence
(77 x 768 by default, standing in for a text encoding). Identity embeddings
and attribute feature grids are projected there by the same architecture: a
bank of learned queries refined by a 3-layer pre-LN transformer decoder that
self-attends over the queries and cross-attends into the projected input
features. Output length is a property of the query bank, never of the input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ContractViolationError
from .torch_utils import parameter_version, seed_parameters


class TokenKind(enum.Enum):
    IDENTITY = "identity"
    ATTRIBUTE = "attribute"
    NULL = "null"


@dataclass(frozen=True)
class TokenSequence:
    """A (N, D) block of conditioning tokens tagged with what produced it."""

    tokens: torch.Tensor
    kind: TokenKind

    def __post_init__(self):
        if not isinstance(self.tokens, torch.Tensor) or self.tokens.ndim != 2:
            raise ContractViolationError("token sequence must be a 2-D torch tensor")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def concat_context(identity: TokenSequence, attribute: TokenSequence) -> torch.Tensor:
    """Identity-first concatenation; this exact order feeds every cross-attention."""
    if identity.dim != attribute.dim:
        raise ContractViolationError(
            f"token widths differ: identity {identity.dim} vs attribute {attribute.dim}"
        )
    return torch.cat([identity.tokens, attribute.tokens], dim=0)


class CrossAttention(nn.Module):
    """Multi-head attention with separate query and key/value sources.

    Args:
        dim: query (and output) width.
        kv_dim: key/value input width (defaults to dim).
        heads: head count; must divide dim.
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads != 0:
            raise ContractViolationError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim if kv_dim is not None else dim
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        q = self.to_q(x).reshape(b, n, h, d // h).transpose(1, 2)
        k = self.to_k(context).reshape(b, context.shape[1], h, d // h).transpose(1, 2)
        v = self.to_v(context).reshape(b, context.shape[1], h, d // h).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.to_out(out)


class DecoderLayer(nn.Module):
    """Pre-LN: self-attention over queries, cross-attention to memory, MLP."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = CrossAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, dim * ff_mult),
            nn.GELU(),
            nn.Linear(dim * ff_mult, dim),
        )

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.self_attn(y, y)
        x = x + self.cross_attn(self.norm2(x), memory)
        x = x + self.ff(self.norm3(x))
        return x


class TokenMapper(nn.Module):
    """Learned queries + transformer decoder: features -> (n_tokens, token_dim).

    No dropout anywhere, so the forward pass is identical in train and eval
    modes and differentiation is exact. The input may be a single feature
    vector (D,), a feature sequence (S, D), or a batch (B, S, D).
    """

    def __init__(
        self,
        input_dim: int,
        n_tokens: int = 77,
        token_dim: int = 768,
        n_layers: int = 3,
        heads: int = 8,
        ff_mult: int = 4,
        seed: int = 0,
    ):
        super().__init__()
        if n_tokens <= 0 or token_dim <= 0 or n_layers <= 0:
            raise ContractViolationError("mapper dimensions must be positive")
        self.input_dim = input_dim
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        self.queries = nn.Parameter(torch.zeros(n_tokens, token_dim))
        self.input_proj = nn.Linear(input_dim, token_dim)
        self.norm_memory = nn.LayerNorm(token_dim)
        self.layers = nn.ModuleList(DecoderLayer(token_dim, heads, ff_mult) for _ in range(n_layers))
        self.norm_out = nn.LayerNorm(token_dim)
        seed_parameters(self, seed)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim == 1:
            features = features[None, None, :]
        elif features.ndim == 2:
            features = features[None]
        if features.ndim != 3 or features.shape[-1] != self.input_dim:
            raise ContractViolationError(
                f"mapper expects features with last dim {self.input_dim}, got shape {tuple(features.shape)}"
            )
        b = features.shape[0]
        memory = self.norm_memory(self.input_proj(features))
        x = self.queries[None].expand(b, -1, -1)
        for layer in self.layers:
            x = layer(x, memory)
        return self.norm_out(x)

    def map_single(self, features: torch.Tensor, kind: TokenKind) -> TokenSequence:
        """Map one example and tag the result."""
        out = self.forward(features)
        if out.shape[0] != 1:
            raise ContractViolationError("map_single expects a single example")
        return TokenSequence(tokens=out[0], kind=kind)


def null_tokens(mapper: TokenMapper, kind: TokenKind = TokenKind.NULL) -> TokenSequence:
    """The mapper's output on an all-zero input: the learned null condition.

    In training mode this recomputes inside the autograd graph (dropping a
    condition must still train the mapper). In eval mode the result is cached
    on the mapper and invalidated when any parameter is mutated in place
    (optimizer steps bump tensor version counters), so a loaded checkpoint
    computes it exactly once.
    """
    zero = torch.zeros(1, 1, mapper.input_dim)
    if mapper.training:
        return TokenSequence(tokens=mapper(zero)[0], kind=kind)
    version = parameter_version(mapper)
    cached = getattr(mapper, "_null_cache", None)
    if cached is not None and cached[0] == version:
        return TokenSequence(tokens=cached[1], kind=kind)
    with torch.no_grad():
        tokens = mapper(zero)[0]
    mapper._null_cache = (version, tokens)
    return TokenSequence(tokens=tokens, kind=kind)
