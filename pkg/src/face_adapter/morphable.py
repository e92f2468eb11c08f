"""Linear blendshape face model, coefficient plumbing, and landmark rendering.

A face is described by coefficient groups (identity, expression, rotation,
translation, gaze). Geometry is the usual linear model

    vertices = mean + identity_basis @ id + expression_basis @ exp

followed by a rigid pose and a weak-perspective projection onto a pixel
canvas. Reenactment and swapping both run on *recombined* coefficients:
identity from the source face, everything else from the target face, so the
rendered landmark image carries target motion with source-shaped features.

Conventions (fixed here, relied on by tests):
  - rotation = (pitch, yaw, roll) in radians, R = Rz @ Ry @ Rx, p = R v + t
  - projection scale = focal_px / t_z (t_z <= 1e-6 falls back to unit depth),
    px = cx + s * x, py = cy - s * y, canvas center ((w-1)/2, (h-1)/2)
  - landmark dots are filled discs around the rounded center; radius 0 paints
    exactly one pixel; groups are painted in order and later groups overwrite
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolationError, FormatError

MODEL_MAGIC = b"FADM"
MODEL_VERSION = 1

COEFFS_HEADER = "face-coefficients v1"
_COEFF_KEYS = ("identity", "expression", "rotation", "translation", "gaze")


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractViolationError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolationError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class FaceCoefficients:
    """One face's control vector, split into the groups the tasks recombine."""

    identity: np.ndarray
    expression: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    gaze: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "identity", _as_vector(self.identity, "identity"))
        object.__setattr__(self, "expression", _as_vector(self.expression, "expression"))
        object.__setattr__(self, "rotation", _as_vector(self.rotation, "rotation"))
        object.__setattr__(self, "translation", _as_vector(self.translation, "translation"))
        object.__setattr__(self, "gaze", _as_vector(self.gaze, "gaze"))
        if self.rotation.shape != (3,):
            raise ContractViolationError(f"rotation must have 3 components, got {self.rotation.shape}")
        if self.translation.shape != (3,):
            raise ContractViolationError(f"translation must have 3 components, got {self.translation.shape}")

    def motion_groups(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.expression, self.rotation, self.translation, self.gaze


def recombine_coefficients(source: FaceCoefficients, target: FaceCoefficients) -> FaceCoefficients:
    """Source identity, target everything else.

    This is the coefficient recombination both tasks drive rendering with:
    the output face has the source's shape identity and the target's
    expression, pose, and gaze. Dimensions of matching groups must agree.
    """
    if source.identity.shape != target.identity.shape:
        raise ContractViolationError(
            f"identity dimensions differ: {source.identity.shape[0]} vs {target.identity.shape[0]}"
        )
    if source.expression.shape != target.expression.shape:
        raise ContractViolationError(
            f"expression dimensions differ: {source.expression.shape[0]} vs {target.expression.shape[0]}"
        )
    if source.gaze.shape != target.gaze.shape:
        raise ContractViolationError(
            f"gaze dimensions differ: {source.gaze.shape[0]} vs {target.gaze.shape[0]}"
        )
    return FaceCoefficients(
        identity=source.identity.copy(),
        expression=target.expression.copy(),
        rotation=target.rotation.copy(),
        translation=target.translation.copy(),
        gaze=target.gaze.copy(),
    )


@dataclass(frozen=True)
class MorphableModel:
    """Linear blendshape model with a fixed landmark index list.

    mean: (V, 3) vertex positions
    identity_basis: (V, 3, D_id)
    expression_basis: (V, 3, D_exp)
    landmarks: (L,) indices into the vertex list
    """

    mean: np.ndarray
    identity_basis: np.ndarray
    expression_basis: np.ndarray
    landmarks: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        idb = np.asarray(self.identity_basis, dtype=np.float64)
        exb = np.asarray(self.expression_basis, dtype=np.float64)
        lmk = np.asarray(self.landmarks, dtype=np.int64)
        if mean.ndim != 2 or mean.shape[1] != 3:
            raise ContractViolationError(f"mean must be (V, 3), got {mean.shape}")
        v = mean.shape[0]
        if idb.shape[:2] != (v, 3) or idb.ndim != 3:
            raise ContractViolationError(f"identity basis must be (V, 3, D_id), got {idb.shape}")
        if exb.shape[:2] != (v, 3) or exb.ndim != 3:
            raise ContractViolationError(f"expression basis must be (V, 3, D_exp), got {exb.shape}")
        if lmk.ndim != 1 or lmk.size == 0:
            raise ContractViolationError("landmark index list must be a non-empty vector")
        if lmk.min() < 0 or lmk.max() >= v:
            raise ContractViolationError(f"landmark indices out of range for {v} vertices")
        for name, arr in (("mean", mean), ("identity basis", idb), ("expression basis", exb)):
            if not np.all(np.isfinite(arr)):
                raise ContractViolationError(f"{name} contains non-finite values")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "identity_basis", idb)
        object.__setattr__(self, "expression_basis", exb)
        object.__setattr__(self, "landmarks", lmk)

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[0]

    @property
    def identity_dim(self) -> int:
        return self.identity_basis.shape[2]

    @property
    def expression_dim(self) -> int:
        return self.expression_basis.shape[2]


def reconstruct_vertices(coeffs: FaceCoefficients, model: MorphableModel) -> np.ndarray:
    """mean + identity_basis @ id + expression_basis @ exp -> (V, 3) float64."""
    if coeffs.identity.shape[0] != model.identity_dim:
        raise ContractViolationError(
            f"identity coefficient length {coeffs.identity.shape[0]} != model identity dim {model.identity_dim}"
        )
    if coeffs.expression.shape[0] != model.expression_dim:
        raise ContractViolationError(
            f"expression coefficient length {coeffs.expression.shape[0]} != model expression dim {model.expression_dim}"
        )
    verts = (
        model.mean
        + model.identity_basis @ coeffs.identity
        + model.expression_basis @ coeffs.expression
    )
    return verts


def rotation_matrix(rotation: np.ndarray) -> np.ndarray:
    """R = Rz(roll) @ Ry(yaw) @ Rx(pitch) for rotation = (pitch, yaw, roll)."""
    pitch, yaw, roll = (float(v) for v in np.asarray(rotation, dtype=np.float64))
    cx, sx = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    cz, sz = math.cos(roll), math.sin(roll)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rz @ ry @ rx


@dataclass(frozen=True)
class Landmarks2D:
    """Projected landmark positions in pixel coordinates (float, y down)."""

    points: np.ndarray  # (L, 2)
    canvas: Tuple[int, int]  # (width, height)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ContractViolationError(f"landmark points must be (L, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractViolationError("landmark points contain non-finite values")
        w, h = self.canvas
        if int(w) <= 0 or int(h) <= 0:
            raise ContractViolationError(f"canvas must be positive, got {self.canvas}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "canvas", (int(w), int(h)))


def project_landmarks(
    points: np.ndarray,
    rotation: np.ndarray,
    translation: np.ndarray,
    canvas: Tuple[int, int],
    focal_px: Optional[float] = None,
) -> Landmarks2D:
    """Rigid pose + weak-perspective projection of 3-D points onto a canvas.

    Args:
        points: (N, 3) model-space points (usually vertices[model.landmarks]).
        rotation: (pitch, yaw, roll) radians.
        translation: (tx, ty, tz); tz is the camera depth used for scale.
        canvas: (width, height) in pixels.
        focal_px: pixels per scene unit at depth 1; default 1.4 * min(canvas).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ContractViolationError(f"points must be (N, 3), got {pts.shape}")
    rot = _as_vector(rotation, "rotation")
    if rot.shape != (3,):
        raise ContractViolationError("rotation must have 3 components")
    t = _as_vector(translation, "translation")
    if t.shape != (3,):
        raise ContractViolationError("translation must have 3 components")
    w, h = int(canvas[0]), int(canvas[1])
    if w <= 0 or h <= 0:
        raise ContractViolationError(f"canvas must be positive, got {canvas}")
    if focal_px is None:
        focal_px = 1.4 * min(w, h)
    if not (focal_px > 0):
        raise ContractViolationError(f"focal_px must be positive, got {focal_px}")

    posed = pts @ rotation_matrix(rot).T + t
    depth = t[2] if t[2] > 1e-6 else 1.0
    scale = focal_px / depth
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    out = np.empty((pts.shape[0], 2), dtype=np.float64)
    out[:, 0] = cx + scale * posed[:, 0]
    out[:, 1] = cy - scale * posed[:, 1]
    return Landmarks2D(points=out, canvas=(w, h))


def landmarks_for(
    coeffs: FaceCoefficients,
    model: MorphableModel,
    canvas: Tuple[int, int],
    focal_px: Optional[float] = None,
) -> Landmarks2D:
    """Reconstruct, select the landmark subset, pose, and project."""
    verts = reconstruct_vertices(coeffs, model)
    return project_landmarks(
        verts[model.landmarks], coeffs.rotation, coeffs.translation, canvas, focal_px
    )


# ---------------------------------------------------------------------------
# landmark rendering
# ---------------------------------------------------------------------------

# the standard 68-point grouping; colors all have a nonzero channel so a lit
# pixel is detectable as "any channel > 0"
_GROUPS_68: Tuple[Tuple[int, int, Tuple[float, float, float]], ...] = (
    (0, 17, (1.0, 1.0, 1.0)),     # jaw
    (17, 22, (1.0, 0.85, 0.1)),   # right eyebrow
    (22, 27, (1.0, 0.5, 0.1)),    # left eyebrow
    (27, 36, (0.2, 1.0, 0.3)),    # nose
    (36, 42, (0.2, 0.6, 1.0)),    # right eye
    (42, 48, (0.4, 0.2, 1.0)),    # left eye
    (48, 60, (1.0, 0.2, 0.3)),    # outer mouth
    (60, 68, (1.0, 0.4, 0.7)),    # inner mouth
)


@dataclass(frozen=True)
class RenderStyle:
    """Dot radius and group palette for landmark images.

    radius: integer disc radius in pixels; None scales the 512-canvas default
    of 2 by min(canvas) / 512 and floors the result at 1.
    groups: (start, end, rgb) spans over the landmark index range. Every color
    must have a nonzero channel, otherwise the dot would be indistinguishable
    from unlit background.
    """

    radius: Optional[int] = None
    groups: Optional[Tuple[Tuple[int, int, Tuple[float, float, float]], ...]] = None

    def resolved_radius(self, canvas: Tuple[int, int]) -> int:
        if self.radius is not None:
            if self.radius < 0:
                raise ContractViolationError(f"radius must be >= 0, got {self.radius}")
            return int(self.radius)
        return max(1, int(round(2.0 * min(canvas) / 512.0)))

    def resolved_groups(self, n_points: int):
        groups = self.groups
        if groups is None:
            if n_points == 0:
                return ()
            groups = _GROUPS_68 if n_points == 68 else ((0, n_points, (1.0, 1.0, 1.0)),)
        for start, end, color in groups:
            if not (0 <= start < end <= n_points):
                raise ContractViolationError(f"group span ({start}, {end}) invalid for {n_points} landmarks")
            if max(color) <= 0.0:
                raise ContractViolationError(f"group color {color} has no nonzero channel")
        return groups


def render_landmark_image(landmarks: Landmarks2D, style: Optional[RenderStyle] = None) -> np.ndarray:
    """Rasterize grouped landmark dots onto a black canvas.

    Returns float32 (H, W, 3) in [0, 1]. Deterministic: pure array math,
    groups painted in order (later groups overwrite earlier ones where discs
    overlap). Dots falling outside the canvas are clipped away silently.
    """
    style = style or RenderStyle()
    w, h = landmarks.canvas
    pts = landmarks.points
    radius = style.resolved_radius((w, h))
    out = np.zeros((h, w, 3), dtype=np.float32)

    offsets = None
    if radius > 0:
        span = np.arange(-radius, radius + 1)
        dx, dy = np.meshgrid(span, span)
        keep = (dx * dx + dy * dy) <= radius * radius
        offsets = np.stack([dx[keep], dy[keep]], axis=1)

    for start, end, color in style.resolved_groups(pts.shape[0]):
        col = np.asarray(color, dtype=np.float32)
        for i in range(start, end):
            rx = int(round(pts[i, 0]))
            ry = int(round(pts[i, 1]))
            if radius == 0:
                if 0 <= rx < w and 0 <= ry < h:
                    out[ry, rx] = col
                continue
            xs = rx + offsets[:, 0]
            ys = ry + offsets[:, 1]
            ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
            out[ys[ok], xs[ok]] = col
    return out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_model(path: str | os.PathLike, model: MorphableModel) -> None:
    """Write the binary model file.

    Layout (little-endian throughout): magic b"FADM", u32 version, u32 V,
    u32 D_id, u32 D_exp, u32 L, L x u32 landmark indices, then float32 arrays
    mean (V*3), identity basis (V*3*D_id), expression basis (V*3*D_exp) in
    row-major (vertex, axis, column) order.
    """
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(
        struct.pack(
            "<5I",
            MODEL_VERSION,
            model.n_vertices,
            model.identity_dim,
            model.expression_dim,
            model.landmarks.shape[0],
        )
    )
    buf.write(model.landmarks.astype("<u4").tobytes())
    buf.write(model.mean.astype("<f4").tobytes())
    buf.write(model.identity_basis.astype("<f4").tobytes())
    buf.write(model.expression_basis.astype("<f4").tobytes())
    with open(os.fspath(path), "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path: str | os.PathLike) -> MorphableModel:
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    if len(data) < 4 + 20:
        raise FormatError(f"model file {path} is truncated (no header)")
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"model file {path} has bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    version, v, d_id, d_exp, n_lmk = struct.unpack_from("<5I", data, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"model file {path} has unsupported version {version}")
    if v == 0 or d_id == 0 or d_exp == 0 or n_lmk == 0:
        raise FormatError(f"model file {path} declares empty dimensions")
    off = 24
    need = n_lmk * 4 + v * 3 * 4 + v * 3 * d_id * 4 + v * 3 * d_exp * 4
    if len(data) != off + need:
        raise FormatError(
            f"model file {path} has {len(data)} bytes, expected {off + need} for its declared dimensions"
        )
    lmk = np.frombuffer(data, dtype="<u4", count=n_lmk, offset=off).astype(np.int64)
    off += n_lmk * 4
    mean = np.frombuffer(data, dtype="<f4", count=v * 3, offset=off).astype(np.float64).reshape(v, 3)
    off += v * 3 * 4
    idb = (
        np.frombuffer(data, dtype="<f4", count=v * 3 * d_id, offset=off)
        .astype(np.float64)
        .reshape(v, 3, d_id)
    )
    off += v * 3 * d_id * 4
    exb = (
        np.frombuffer(data, dtype="<f4", count=v * 3 * d_exp, offset=off)
        .astype(np.float64)
        .reshape(v, 3, d_exp)
    )
    if lmk.max(initial=0) >= v:
        raise FormatError(f"model file {path} has landmark indices out of range")
    return MorphableModel(mean=mean, identity_basis=idb, expression_basis=exb, landmarks=lmk)


def _format_floats(arr: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in arr)


def save_coefficients(path: str | os.PathLike, coeffs: FaceCoefficients) -> None:
    """Write coefficients as line-oriented text with exact float round-trip."""
    lines = [COEFFS_HEADER]
    lines.append("identity: " + _format_floats(coeffs.identity))
    lines.append("expression: " + _format_floats(coeffs.expression))
    lines.append("rotation: " + _format_floats(coeffs.rotation))
    lines.append("translation: " + _format_floats(coeffs.translation))
    lines.append("gaze: " + _format_floats(coeffs.gaze))
    with open(os.fspath(path), "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_coefficients(path: str | os.PathLike) -> FaceCoefficients:
    with open(os.fspath(path), "r", encoding="ascii") as fh:
        raw = [line.rstrip("\n") for line in fh]
    lines = [line for line in raw if line.strip()]
    if not lines or lines[0].strip() != COEFFS_HEADER:
        raise FormatError(f"coefficients file {path} missing header {COEFFS_HEADER!r}")
    found = {}
    for line in lines[1:]:
        if ":" not in line:
            raise FormatError(f"coefficients file {path}: malformed line {line!r}")
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in _COEFF_KEYS:
            raise FormatError(f"coefficients file {path}: unknown key {key!r}")
        if key in found:
            raise FormatError(f"coefficients file {path}: duplicate key {key!r}")
        try:
            found[key] = np.array([float(tok) for tok in rest.split()], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"coefficients file {path}: bad float in {key!r}: {exc}") from exc
    missing = [k for k in _COEFF_KEYS if k not in found]
    if missing:
        raise FormatError(f"coefficients file {path}: missing keys {missing}")
    try:
        return FaceCoefficients(
            identity=found["identity"],
            expression=found["expression"],
            rotation=found["rotation"],
            translation=found["translation"],
            gaze=found["gaze"],
        )
    except ContractViolationError as exc:
        raise FormatError(f"coefficients file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# built-in toy model
# ---------------------------------------------------------------------------

def _landmark_template() -> np.ndarray:
    """A schematic 68-point face in a unit box (x right, y up, z toward camera)."""
    pts = np.zeros((68, 3), dtype=np.float64)
    # jaw 0-16: open U from left temple through chin to right temple
    for i in range(17):
        t = i / 16.0
        ang = (t - 0.5) * math.pi
        pts[i] = (0.45 * math.sin(ang), 0.20 - 0.70 * math.cos(ang), -0.05)
    # eyebrows 17-21 (subject right) and 22-26 (subject left), gentle arcs
    for i in range(5):
        t = i / 4.0
        arch = 0.03 * math.sin(math.pi * t)
        pts[17 + i] = (-0.35 + 0.25 * t, 0.30 + arch, 0.08)
        pts[22 + i] = (0.10 + 0.25 * t, 0.30 + 0.03 * math.sin(math.pi * (1 - t)), 0.08)
    # nose bridge 27-30 and base 31-35
    for i in range(4):
        pts[27 + i] = (0.0, 0.24 - 0.08 * i, 0.10 + 0.02 * i)
    for i in range(5):
        pts[31 + i] = (-0.08 + 0.04 * i, -0.06 - 0.02 * math.sin(math.pi * i / 4.0), 0.10)
    # eyes 36-41 and 42-47: hexagons
    for k, cx0 in ((36, -0.22), (42, 0.22)):
        for i in range(6):
            ang = math.pi * (1 - i / 3.0)
            pts[k + i] = (cx0 + 0.07 * math.cos(ang), 0.18 + 0.035 * math.sin(ang), 0.05)
    # outer lips 48-59 and inner lips 60-67: ellipses around (0, -0.25)
    for i in range(12):
        ang = math.pi - 2 * math.pi * i / 12.0
        pts[48 + i] = (0.15 * math.cos(ang), -0.25 + 0.055 * math.sin(ang), 0.06)
    for i in range(8):
        ang = math.pi - 2 * math.pi * i / 8.0
        pts[60 + i] = (0.10 * math.cos(ang), -0.25 + 0.025 * math.sin(ang), 0.06)
    return pts


def default_toy_model(seed: int = 20, identity_dim: int = 80, expression_dim: int = 64) -> MorphableModel:
    """Deterministic schematic model: 10 skull vertices + the 68-point face.

    The landmark list selects the trailing 68 vertices, so the index-list
    machinery is exercised even though the toy mesh is sparse. The identity
    basis perturbs every vertex; the expression basis only moves brows, eyes,
    chin, and mouth, which keeps "identity determines the rigid shape" true
    at toy scale.
    """
    face = _landmark_template()
    n_skull = 10
    skull = np.zeros((n_skull, 3), dtype=np.float64)
    for i in range(n_skull):
        ang = math.pi * i / (n_skull - 1)
        skull[i] = (0.55 * math.cos(ang), 0.35 + 0.30 * math.sin(ang), -0.10)
    mean = np.concatenate([skull, face], axis=0)
    v = mean.shape[0]

    rng = np.random.default_rng(seed)
    identity_basis = rng.normal(0.0, 0.015, size=(v, 3, identity_dim))

    # per-vertex mobility for expression: mouth strongest, brows/eyes/chin light
    mobility = np.zeros(v, dtype=np.float64)
    lm = lambda a, b: slice(n_skull + a, n_skull + b)  # noqa: E731 - tiny index helper
    mobility[lm(48, 68)] = 0.030
    mobility[lm(17, 27)] = 0.015
    mobility[lm(36, 48)] = 0.008
    mobility[lm(31, 36)] = 0.010
    mobility[lm(6, 11)] = 0.012  # chin follows the jaw open/close
    expression_basis = rng.normal(0.0, 1.0, size=(v, 3, expression_dim)) * mobility[:, None, None]

    landmarks = np.arange(n_skull, n_skull + 68, dtype=np.int64)
    return MorphableModel(
        mean=mean,
        identity_basis=identity_basis,
        expression_basis=expression_basis,
        landmarks=landmarks,
    )
