"""Corpus manifest format and training-pair sampling.

A corpus is a directory of per-identity frame PNGs with three sidecars each
(coefficients text, head-region mask PNG, face-region mask PNG) plus a JSON
manifest tying them together and naming the blendshape model file. Training
consumes same-identity ordered frame pairs with source != target.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, ContractViolationError, FormatError, IngestionError
from .imaging import load_image, load_mask, resize_image, resize_mask
from .morphable import FaceCoefficients, MorphableModel, load_coefficients, load_model

MANIFEST_FORMAT = "face-adapter-corpus"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class FrameRecord:
    """Relative paths of one frame and its sidecars."""

    frame: str
    coefficients: str
    head_mask: str
    face_mask: str


@dataclass
class CorpusManifest:
    root: Path
    resolution: int
    model_path: Optional[str]
    identities: Dict[str, List[FrameRecord]]

    def frame_count(self) -> int:
        return sum(len(v) for v in self.identities.values())


def save_manifest(path: str | os.PathLike, manifest: CorpusManifest) -> None:
    payload = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "resolution": manifest.resolution,
        "model": manifest.model_path,
        "identities": {
            label: [
                {
                    "frame": r.frame,
                    "coefficients": r.coefficients,
                    "head_mask": r.head_mask,
                    "face_mask": r.face_mask,
                }
                for r in records
            ]
            for label, records in manifest.identities.items()
        },
    }
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | os.PathLike) -> CorpusManifest:
    p = Path(os.fspath(path))
    try:
        with open(p, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {p} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"manifest {p} missing format tag {MANIFEST_FORMAT!r}")
    if payload.get("version") != MANIFEST_VERSION:
        raise FormatError(f"manifest {p} has unsupported version {payload.get('version')!r}")
    resolution = payload.get("resolution")
    if not isinstance(resolution, int) or resolution <= 0:
        raise FormatError(f"manifest {p} has invalid resolution {resolution!r}")
    identities_raw = payload.get("identities")
    if not isinstance(identities_raw, dict):
        raise FormatError(f"manifest {p} identities must be a mapping")
    if not identities_raw:
        raise ConfigurationError(f"manifest {p} lists no identities")
    identities: Dict[str, List[FrameRecord]] = {}
    for label in sorted(identities_raw):
        records = identities_raw[label]
        if not isinstance(records, list):
            raise FormatError(f"manifest {p}: identity {label} is not a list")
        out = []
        for i, rec in enumerate(records):
            try:
                out.append(
                    FrameRecord(
                        frame=rec["frame"],
                        coefficients=rec["coefficients"],
                        head_mask=rec["head_mask"],
                        face_mask=rec["face_mask"],
                    )
                )
            except (KeyError, TypeError) as exc:
                raise FormatError(f"manifest {p}: identity {label} record {i} malformed: {exc}") from exc
        identities[label] = out
    return CorpusManifest(
        root=p.parent,
        resolution=resolution,
        model_path=payload.get("model"),
        identities=identities,
    )


@dataclass(frozen=True)
class TrainingPair:
    """A same-identity (source frame, target frame) pair, fully loaded."""

    identity: str
    source_image: np.ndarray
    target_image: np.ndarray
    source_coeffs: FaceCoefficients
    target_coeffs: FaceCoefficients
    source_head: np.ndarray
    target_head: np.ndarray
    target_face: np.ndarray


@dataclass(frozen=True)
class LoadedFrame:
    image: np.ndarray
    coeffs: FaceCoefficients
    head: np.ndarray
    face: np.ndarray


class PairSampler:
    """Deterministic pair stream over a corpus manifest.

    Frames are loaded lazily, resized to the requested resolution, and cached
    in memory (toy corpora are tiny). Sampling draws only from the supplied
    numpy Generator, so a fixed seed reproduces the exact pair sequence.
    """

    def __init__(self, manifest: CorpusManifest, resolution: Optional[int] = None):
        self.manifest = manifest
        self.resolution = int(resolution or manifest.resolution)
        self.labels = [label for label, recs in sorted(manifest.identities.items()) if len(recs) >= 2]
        skipped = sorted(set(manifest.identities) - set(self.labels))
        if skipped:
            import warnings

            warnings.warn(f"identities with fewer than 2 frames skipped: {skipped}", stacklevel=2)
        if not self.labels:
            raise IngestionError("no identity in the corpus has at least 2 frames")
        self._cache: Dict[Tuple[str, int], LoadedFrame] = {}
        self._model: Optional[MorphableModel] = None

    @property
    def morphable(self) -> Optional[MorphableModel]:
        if self._model is None and self.manifest.model_path:
            self._model = load_model(self.manifest.root / self.manifest.model_path)
        return self._model

    def frame(self, label: str, index: int) -> LoadedFrame:
        key = (label, index)
        if key not in self._cache:
            rec = self.manifest.identities[label][index]
            root = self.manifest.root
            size = (self.resolution, self.resolution)
            try:
                image = resize_image(load_image(root / rec.frame), size)
                head = resize_mask(load_mask(root / rec.head_mask), size)
                face = resize_mask(load_mask(root / rec.face_mask), size)
                coeffs = load_coefficients(root / rec.coefficients)
            except FileNotFoundError as exc:
                raise IngestionError(f"corpus record {label}[{index}] is missing a file: {exc}") from exc
            self._cache[key] = LoadedFrame(image=image, coeffs=coeffs, head=head, face=face)
        return self._cache[key]

    def pair_from_indices(self, label: str, source_idx: int, target_idx: int) -> TrainingPair:
        if source_idx == target_idx:
            raise ContractViolationError("training pair must use distinct frames")
        src = self.frame(label, source_idx)
        tgt = self.frame(label, target_idx)
        return TrainingPair(
            identity=label,
            source_image=src.image,
            target_image=tgt.image,
            source_coeffs=src.coeffs,
            target_coeffs=tgt.coeffs,
            source_head=src.head,
            target_head=tgt.head,
            target_face=tgt.face,
        )

    def sample_pair(self, rng: np.random.Generator) -> TrainingPair:
        label = self.labels[int(rng.integers(0, len(self.labels)))]
        n = len(self.manifest.identities[label])
        source_idx = int(rng.integers(0, n))
        target_idx = int(rng.integers(0, n - 1))
        if target_idx >= source_idx:
            target_idx += 1
        return self.pair_from_indices(label, source_idx, target_idx)


def ingest_dataset(manifest_path: str | os.PathLike, resolution: Optional[int] = None) -> PairSampler:
    """Open a corpus for training: parse the manifest and wrap it in a sampler."""
    return PairSampler(load_manifest(manifest_path), resolution)
