"""Procedural face corpus: schematic renders with exact region masks.

Each identity gets fixed blendshape identity coefficients, a color palette,
and a static background; each frame draws the same face under fresh
expression/pose/gaze. The "parser" that real data would need is analytic
here: head and face regions come from the same projected-landmark geometry
the renderer draws, so ground-truth masks are exact by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .data import CorpusManifest, FrameRecord, save_manifest
from .errors import ContractViolationError
from .imaging import save_image, save_mask
from .morphable import (
    FaceCoefficients,
    MorphableModel,
    default_toy_model,
    landmarks_for,
    save_coefficients,
    save_model,
)

MODEL_FILENAME = "model.fadm"


@dataclass(frozen=True)
class FaceGeometry:
    """Ellipse/box parameters shared by the renderer and the region parser."""

    cx: float
    cy: float
    half_w: float
    half_h: float

    @classmethod
    def from_landmarks(cls, points: np.ndarray) -> "FaceGeometry":
        xmin, ymin = points.min(axis=0)
        xmax, ymax = points.max(axis=0)
        return cls(
            cx=float((xmin + xmax) / 2.0),
            cy=float((ymin + ymax) / 2.0),
            half_w=float(max((xmax - xmin) / 2.0, 1.0)),
            half_h=float(max((ymax - ymin) / 2.0, 1.0)),
        )


def _ellipse(xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, a: float, b: float) -> np.ndarray:
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def _disc(img: np.ndarray, x: float, y: float, r: int, color: np.ndarray) -> None:
    h, w = img.shape[:2]
    rx, ry = int(round(x)), int(round(y))
    x0, x1 = max(0, rx - r), min(w, rx + r + 1)
    y0, y1 = max(0, ry - r), min(h, ry + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    sel = (xx - rx) ** 2 + (yy - ry) ** 2 <= r * r
    img[y0:y1, x0:x1][sel] = color


def region_masks(geom: FaceGeometry, canvas: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic head and face regions for a projected face.

    Head = inflated ellipse (cranium and hair) union a neck box; face = the
    inner ellipse around the landmarks. Returns float32 {0, 1} arrays.
    """
    w, h = canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    head_cy = geom.cy - 0.18 * geom.half_h
    head = _ellipse(xx, yy, geom.cx, head_cy, 1.30 * geom.half_w, 1.55 * geom.half_h)
    neck = (
        (np.abs(xx - geom.cx) <= 0.38 * geom.half_w)
        & (yy >= geom.cy + 0.60 * geom.half_h)
        & (yy <= geom.cy + 2.00 * geom.half_h)
    )
    face = _ellipse(xx, yy, geom.cx, geom.cy, 1.08 * geom.half_w, 1.14 * geom.half_h)
    return (head | neck).astype(np.float32), face.astype(np.float32)


@dataclass(frozen=True)
class IdentityStyle:
    skin: np.ndarray
    hair: np.ndarray
    lips: np.ndarray
    bg0: np.ndarray
    bg1: np.ndarray

    @classmethod
    def from_rng(cls, rng: np.random.Generator) -> "IdentityStyle":
        skin = np.array(
            [0.68 + 0.22 * rng.random(), 0.48 + 0.18 * rng.random(), 0.34 + 0.16 * rng.random()],
            dtype=np.float32,
        )
        hair = rng.uniform(0.05, 0.38, size=3).astype(np.float32)
        lips = np.array([0.62 + 0.25 * rng.random(), 0.15 + 0.15 * rng.random(), 0.2 + 0.1 * rng.random()], dtype=np.float32)
        bg0 = rng.uniform(0.15, 0.85, size=3).astype(np.float32)
        bg1 = rng.uniform(0.15, 0.85, size=3).astype(np.float32)
        return cls(skin=skin, hair=hair, lips=lips, bg0=bg0, bg1=bg1)


def sample_identity_coefficients(rng: np.random.Generator, model: MorphableModel) -> np.ndarray:
    return np.clip(rng.normal(0.0, 1.0, size=model.identity_dim), -2.5, 2.5)


def sample_motion(rng: np.random.Generator, model: MorphableModel) -> Dict[str, np.ndarray]:
    return {
        "expression": np.clip(rng.normal(0.0, 0.8, size=model.expression_dim), -2.0, 2.0),
        "rotation": np.clip(rng.normal(0.0, 0.12, size=3), -0.35, 0.35),
        "translation": np.array(
            [
                float(np.clip(rng.normal(0.0, 0.05), -0.15, 0.15)),
                float(np.clip(rng.normal(0.0, 0.05), -0.15, 0.15)),
                float(np.clip(2.5 + rng.normal(0.0, 0.15), 2.2, 2.9)),
            ]
        ),
        "gaze": rng.uniform(-1.0, 1.0, size=2),
    }


def render_face_frame(
    coeffs: FaceCoefficients,
    model: MorphableModel,
    resolution: int,
    style: IdentityStyle,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one schematic face; returns (image, head_mask, face_mask)."""
    if resolution <= 0:
        raise ContractViolationError(f"resolution must be positive, got {resolution}")
    w = h = resolution
    lmk = landmarks_for(coeffs, model, (w, h))
    pts = lmk.points
    geom = FaceGeometry.from_landmarks(pts)
    head_mask, face_mask = region_masks(geom, (w, h))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    ramp = ((xx + yy) / float(w + h))[:, :, None]
    img = style.bg0[None, None] * (1.0 - ramp) + style.bg1[None, None] * ramp

    head_cy = geom.cy - 0.18 * geom.half_h
    head_ellipse = _ellipse(xx, yy, geom.cx, head_cy, 1.30 * geom.half_w, 1.55 * geom.half_h)
    neck = (head_mask > 0.5) & ~head_ellipse
    img[neck] = style.skin * 0.9
    img[head_ellipse] = style.skin
    hair = head_ellipse & (yy < geom.cy - 0.62 * geom.half_h)
    img[hair] = style.hair

    r_feat = max(1, int(round(resolution / 64.0)))
    brow_color = style.hair * 0.8
    for i in range(17, 27):
        _disc(img, pts[i, 0], pts[i, 1], r_feat, brow_color)
    nose_color = style.skin * 0.78
    for i in range(27, 36):
        _disc(img, pts[i, 0], pts[i, 1], r_feat, nose_color)

    # eyes: white ellipse around each landmark hexagon, pupil offset by gaze
    for lo, hi in ((36, 42), (42, 48)):
        eye = pts[lo:hi]
        ec = eye.mean(axis=0)
        ew = max((eye[:, 0].max() - eye[:, 0].min()) / 2.0 * 1.25, 1.5)
        eh = max((eye[:, 1].max() - eye[:, 1].min()) / 2.0 * 1.6, 1.2)
        sel = _ellipse(xx, yy, ec[0], ec[1], ew, eh)
        img[sel] = np.array([0.96, 0.96, 0.97], dtype=np.float32)
        px = ec[0] + float(coeffs.gaze[0]) * 0.45 * ew
        py = ec[1] + float(coeffs.gaze[1]) * 0.45 * eh
        _disc(img, px, py, max(1, int(round(eh * 0.7))), np.array([0.08, 0.07, 0.1], dtype=np.float32))

    mouth = pts[48:60]
    mc = mouth.mean(axis=0)
    mw = max((mouth[:, 0].max() - mouth[:, 0].min()) / 2.0, 1.5)
    mh = max((mouth[:, 1].max() - mouth[:, 1].min()) / 2.0, 1.0)
    img[_ellipse(xx, yy, mc[0], mc[1], mw, mh)] = style.lips

    return np.clip(img, 0.0, 1.0).astype(np.float32), head_mask, face_mask


def generate_corpus(
    out_dir: str | os.PathLike,
    identities: int,
    frames: int,
    resolution: int,
    seed: int,
    model: Optional[MorphableModel] = None,
) -> Path:
    """Write a full synthetic corpus; returns the manifest path.

    Deterministic in (identities, frames, resolution, seed): every random
    draw comes from generators keyed on (seed, identity index[, frame index]).
    """
    if identities <= 0 or frames <= 0:
        raise ContractViolationError("identities and frames must be positive")
    model = model or default_toy_model()
    root = Path(os.fspath(out_dir))
    root.mkdir(parents=True, exist_ok=True)
    save_model(root / MODEL_FILENAME, model)

    manifest_identities: Dict[str, list] = {}
    for i in range(identities):
        label = f"id_{i:03d}"
        id_rng = np.random.default_rng([seed, i])
        style = IdentityStyle.from_rng(id_rng)
        id_coeffs = sample_identity_coefficients(id_rng, model)
        ident_dir = root / label
        ident_dir.mkdir(exist_ok=True)
        records = []
        for j in range(frames):
            frame_rng = np.random.default_rng([seed, i, j])
            motion = sample_motion(frame_rng, model)
            coeffs = FaceCoefficients(identity=id_coeffs, **motion)
            image, head, face = render_face_frame(coeffs, model, resolution, style)
            stem = f"frame_{j:03d}"
            save_image(ident_dir / f"{stem}.png", image)
            save_mask(ident_dir / f"{stem}_head.png", head)
            save_mask(ident_dir / f"{stem}_face.png", face)
            save_coefficients(ident_dir / f"{stem}.coeffs.txt", coeffs)
            records.append(
                FrameRecord(
                    frame=f"{label}/{stem}.png",
                    coefficients=f"{label}/{stem}.coeffs.txt",
                    head_mask=f"{label}/{stem}_head.png",
                    face_mask=f"{label}/{stem}_face.png",
                )
            )
        manifest_identities[label] = records

    manifest = CorpusManifest(
        root=root,
        resolution=resolution,
        model_path=MODEL_FILENAME,
        identities=manifest_identities,
    )
    manifest_path = root / "manifest.json"
    save_manifest(manifest_path, manifest)
    return manifest_path
