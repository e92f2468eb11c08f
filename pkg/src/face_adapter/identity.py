"""Identity conditioning: face embedding -> tokens the frozen denoiser reads.

The recognizer is pluggable. The toy recognizer is a fixed seeded linear map
over downsampled pixels followed by L2 normalization: deterministic, distinct
images map to distinct directions, and it needs no external weights. A real
recognizer (ArcFace-style) would slot in behind the same two-member protocol.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
import torch

from .errors import ContractViolationError, ExtractionError
from .imaging import resize_image
from .mappers import TokenKind, TokenMapper, TokenSequence, null_tokens


@dataclass(frozen=True)
class IdentityEmbedding:
    """Unit-norm face embedding, float32 (D,)."""

    vector: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.vector, dtype=np.float32)
        if arr.ndim != 1 or arr.size == 0:
            raise ContractViolationError(f"embedding must be a non-empty vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError("embedding contains non-finite values")
        norm = float(np.linalg.norm(arr))
        if not np.isclose(norm, 1.0, atol=1e-4):
            raise ContractViolationError(f"embedding must be unit norm, got {norm:.6f}")
        object.__setattr__(self, "vector", arr)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@runtime_checkable
class FaceRecognizer(Protocol):
    embed_dim: int

    def embed(self, image: np.ndarray) -> np.ndarray:
        """Raw (un-normalized) embedding of an RGB float image in [0, 1]."""
        ...


class ToyFaceRecognizer:
    """Seeded random linear map over a downsampled frame.

    Not a face model at all, but it has the properties the pipeline needs
    from one: fixed weights, deterministic output, and embeddings that vary
    smoothly with the pictured face.
    """

    def __init__(self, embed_dim: int = 512, input_size: int = 32, seed: int = 101):
        self.embed_dim = embed_dim
        self.input_size = input_size
        rng = np.random.default_rng(seed)
        n_in = input_size * input_size * 3
        self.weight = rng.standard_normal((embed_dim, n_in)).astype(np.float32) / np.sqrt(n_in)

    def embed(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ExtractionError(f"recognizer input must be (H, W, 3), got shape {arr.shape}")
        small = resize_image(arr, (self.input_size, self.input_size))
        return self.weight @ small.reshape(-1)


def extract_face_embedding(recognizer: FaceRecognizer, image: np.ndarray) -> IdentityEmbedding:
    """Embed a frame and normalize. Degenerate (near-zero) output is an error."""
    raw = np.asarray(recognizer.embed(image), dtype=np.float32)
    if raw.ndim != 1:
        raise ExtractionError(f"recognizer returned shape {raw.shape}, expected a vector")
    if not np.all(np.isfinite(raw)):
        raise ExtractionError("recognizer returned non-finite values")
    norm = float(np.linalg.norm(raw))
    if norm < 1e-8:
        raise ExtractionError("recognizer returned a zero embedding (no face signal)")
    return IdentityEmbedding(vector=raw / norm)


def identity_to_tokens(mapper: TokenMapper, embedding: IdentityEmbedding) -> TokenSequence:
    """Project one face embedding to the denoiser's token space."""
    if embedding.dim != mapper.input_dim:
        raise ContractViolationError(
            f"embedding dim {embedding.dim} != mapper input dim {mapper.input_dim}"
        )
    features = torch.from_numpy(embedding.vector.copy())
    return mapper.map_single(features, TokenKind.IDENTITY)


def null_identity_tokens(mapper: TokenMapper) -> TokenSequence:
    return null_tokens(mapper, TokenKind.NULL)
