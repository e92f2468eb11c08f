"""Evaluation: identity similarity, motion errors, retrieval, PSNR, reports.

Identity metrics run on recognizer embeddings; motion metrics compare
coefficient groups read from sidecar files (the same pluggable-estimator
convention inference inputs use); PSNR compares pixels and reports the exact
math.inf sentinel for identical images. FID and LPIPS have registry slots so
an external implementation can plug in; without one the report prints
"unavailable" rather than a number.

Set FACE_ADAPTER_CACHE to a directory to cache per-file recognizer
embeddings across eval runs (keyed by file content and recognizer weights).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import cache_dir
from .errors import FormatError, MetricError
from .identity import FaceRecognizer, extract_face_embedding
from .imaging import load_image
from .morphable import FaceCoefficients, load_coefficients

EVAL_FORMAT = "face-adapter-eval"
EVAL_VERSION = 1

REPORT_COLUMNS = (
    "name",
    "status",
    "csim",
    "pose_err",
    "exp_err",
    "gaze_err",
    "psnr",
    "id_retrieval",
    "fid",
    "lpips",
)


def _unit(vec: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64).reshape(-1)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise MetricError(f"{name} embedding is empty or non-finite")
    norm = float(np.linalg.norm(arr))
    if norm < 1e-12:
        raise MetricError(f"{name} embedding has zero norm")
    return arr / norm


def csim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two embeddings (normalized here)."""
    ua, ub = _unit(a, "first"), _unit(b, "second")
    if ua.shape != ub.shape:
        raise MetricError(f"embedding dims differ: {ua.shape[0]} vs {ub.shape[0]}")
    return float(np.dot(ua, ub))


@dataclass(frozen=True)
class MotionErrors:
    pose: float
    expression: float
    gaze: float


def motion_errors(generated: FaceCoefficients, reference: FaceCoefficients) -> MotionErrors:
    """Euclidean distances per motion group; pose covers rotation+translation."""
    if generated.expression.shape != reference.expression.shape:
        raise MetricError(
            f"expression dims differ: {generated.expression.shape} vs {reference.expression.shape}"
        )
    if generated.gaze.shape != reference.gaze.shape:
        raise MetricError(f"gaze dims differ: {generated.gaze.shape} vs {reference.gaze.shape}")
    pose_g = np.concatenate([generated.rotation, generated.translation])
    pose_r = np.concatenate([reference.rotation, reference.translation])
    return MotionErrors(
        pose=float(np.linalg.norm(pose_g - pose_r)),
        expression=float(np.linalg.norm(generated.expression - reference.expression)),
        gaze=float(np.linalg.norm(generated.gaze - reference.gaze)),
    )


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs return math.inf exactly."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"image shapes differ: {x.shape} vs {y.shape}")
    if peak <= 0:
        raise MetricError(f"peak must be positive, got {peak}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def id_retrieval(
    queries: Sequence[Tuple[str, np.ndarray]],
    gallery: Sequence[Tuple[str, np.ndarray]],
    distractors: Sequence[np.ndarray] = (),
) -> float:
    """Fraction of queries whose nearest gallery embedding has their label.

    Nearest = highest cosine similarity; ties resolve to the earliest gallery
    entry (argmax convention). Distractors join the gallery under reserved
    labels that can never match.
    """
    if not queries:
        raise MetricError("retrieval needs at least one query")
    full: List[Tuple[str, np.ndarray]] = [(label, _unit(emb, f"gallery[{label}]")) for label, emb in gallery]
    full.extend((f"~distractor~{i}", _unit(emb, f"distractor[{i}]")) for i, emb in enumerate(distractors))
    if not full:
        raise MetricError("retrieval needs a non-empty gallery")
    mat = np.stack([emb for _, emb in full])
    hits = 0
    for label, emb in queries:
        sims = mat @ _unit(emb, f"query[{label}]")
        if full[int(np.argmax(sims))][0] == label:
            hits += 1
    return hits / len(queries)


# ---------------------------------------------------------------------------
# feature-space metric plug-ins (FID / LPIPS slots)
# ---------------------------------------------------------------------------

FeatureMetric = Callable[[Sequence[str], Sequence[str]], float]
_FEATURE_METRICS: Dict[str, FeatureMetric] = {}


def register_feature_metric(name: str, fn: Optional[FeatureMetric]) -> None:
    """Install (or, with None, remove) a set-level image metric like FID."""
    key = name.lower()
    if fn is None:
        _FEATURE_METRICS.pop(key, None)
    else:
        _FEATURE_METRICS[key] = fn


def feature_metric(name: str) -> Optional[FeatureMetric]:
    return _FEATURE_METRICS.get(name.lower())


# ---------------------------------------------------------------------------
# embedding cache
# ---------------------------------------------------------------------------

def _recognizer_digest(recognizer: FaceRecognizer) -> str:
    weight = getattr(recognizer, "weight", None)
    if weight is None:
        return type(recognizer).__name__
    return hashlib.sha1(np.ascontiguousarray(weight).tobytes()).hexdigest()[:16]


def _embed_path(recognizer: FaceRecognizer, path: Path) -> np.ndarray:
    cache = cache_dir()
    if cache:
        with open(path, "rb") as fh:
            digest = hashlib.sha1(fh.read()).hexdigest()
        key = f"emb_{_recognizer_digest(recognizer)}_{digest}.npy"
        cached = Path(cache) / key
        if cached.exists():
            return np.load(cached)
    emb = extract_face_embedding(recognizer, load_image(path)).vector
    if cache:
        Path(cache).mkdir(parents=True, exist_ok=True)
        np.save(Path(cache) / key, emb)
    return emb


# ---------------------------------------------------------------------------
# run-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalEntry:
    name: str
    generated: str
    reference: Optional[str] = None
    generated_coefficients: Optional[str] = None
    reference_coefficients: Optional[str] = None
    source_label: Optional[str] = None
    source_image: Optional[str] = None


@dataclass
class EvalManifest:
    root: Path
    entries: List[EvalEntry]
    distractors: List[Tuple[str, str]] = field(default_factory=list)


def load_eval_manifest(path: str | os.PathLike) -> EvalManifest:
    p = Path(os.fspath(path))
    try:
        with open(p, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"eval manifest {p} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != EVAL_FORMAT:
        raise FormatError(f"eval manifest {p} missing format tag {EVAL_FORMAT!r}")
    if payload.get("version") != EVAL_VERSION:
        raise FormatError(f"eval manifest {p} has unsupported version {payload.get('version')!r}")
    raw_entries = payload.get("entries")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise FormatError(f"eval manifest {p} has no entries")
    entries = []
    for i, raw in enumerate(raw_entries):
        if not isinstance(raw, dict) or "name" not in raw or "generated" not in raw:
            raise FormatError(f"eval manifest {p}: entry {i} needs at least name and generated")
        entries.append(
            EvalEntry(
                name=str(raw["name"]),
                generated=str(raw["generated"]),
                reference=raw.get("reference"),
                generated_coefficients=raw.get("generated_coefficients"),
                reference_coefficients=raw.get("reference_coefficients"),
                source_label=raw.get("source_label"),
                source_image=raw.get("source_image"),
            )
        )
    distractors = [(str(d["label"]), str(d["image"])) for d in payload.get("distractors", [])]
    return EvalManifest(root=p.parent, entries=entries, distractors=distractors)


@dataclass
class EvalRow:
    name: str
    status: str = "ok"
    csim: Optional[float] = None
    pose_err: Optional[float] = None
    exp_err: Optional[float] = None
    gaze_err: Optional[float] = None
    psnr: Optional[float] = None


@dataclass
class EvalReport:
    rows: List[EvalRow]
    retrieval: Optional[float]
    retrieval_counts: Tuple[int, int]  # (queries, gallery size)
    feature_values: Dict[str, object]  # name -> float or "unavailable"
    warnings: List[str]

    def mean(self, attr: str) -> Optional[float]:
        vals = [getattr(r, attr) for r in self.rows if getattr(r, attr) is not None]
        if not vals:
            return None
        return float(np.mean(vals)) if not any(math.isinf(v) for v in vals) else math.inf


def evaluate_run(manifest: EvalManifest, recognizer: FaceRecognizer) -> EvalReport:
    """Score every entry, skipping (and recording) missing inputs.

    A missing file downgrades its row's status instead of aborting the run;
    the caller decides what to do with the warning list.
    """
    rows: List[EvalRow] = []
    warnings: List[str] = []
    queries: List[Tuple[str, np.ndarray]] = []
    gallery: Dict[str, np.ndarray] = {}
    gen_paths: List[str] = []
    ref_paths: List[str] = []

    def resolve(rel: Optional[str]) -> Optional[Path]:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else manifest.root / p

    for entry in manifest.entries:
        row = EvalRow(name=entry.name)
        gen_path = resolve(entry.generated)
        if gen_path is None or not gen_path.exists():
            row.status = f"missing:{entry.generated}"
            warnings.append(f"{entry.name}: generated image {entry.generated} is missing")
            rows.append(row)
            continue
        gen_image = load_image(gen_path)
        gen_paths.append(str(gen_path))

        ref_path = resolve(entry.reference)
        if entry.reference is not None:
            if ref_path is None or not ref_path.exists():
                row.status = f"missing:{entry.reference}"
                warnings.append(f"{entry.name}: reference image {entry.reference} is missing")
            else:
                ref_image = load_image(ref_path)
                ref_paths.append(str(ref_path))
                try:
                    row.psnr = psnr(gen_image, ref_image)
                except MetricError as exc:
                    row.status = f"error:{exc}"
                    warnings.append(f"{entry.name}: {exc}")

        identity_ref = entry.source_image or entry.reference
        identity_ref_path = resolve(identity_ref)
        if identity_ref_path is not None and identity_ref_path.exists():
            try:
                gen_emb = _embed_path(recognizer, gen_path)
                ref_emb = _embed_path(recognizer, identity_ref_path)
                row.csim = csim(gen_emb, ref_emb)
            except MetricError as exc:
                warnings.append(f"{entry.name}: csim failed: {exc}")

        if entry.generated_coefficients and entry.reference_coefficients:
            gc = resolve(entry.generated_coefficients)
            rc = resolve(entry.reference_coefficients)
            if gc is not None and rc is not None and gc.exists() and rc.exists():
                try:
                    me = motion_errors(load_coefficients(gc), load_coefficients(rc))
                    row.pose_err, row.exp_err, row.gaze_err = me.pose, me.expression, me.gaze
                except (MetricError, FormatError) as exc:
                    warnings.append(f"{entry.name}: motion metrics failed: {exc}")
            else:
                missing = entry.generated_coefficients if (gc is None or not gc.exists()) else entry.reference_coefficients
                warnings.append(f"{entry.name}: coefficients {missing} are missing")

        if entry.source_label and entry.source_image:
            src_path = resolve(entry.source_image)
            if src_path is not None and src_path.exists():
                try:
                    queries.append((entry.source_label, _embed_path(recognizer, gen_path)))
                    gallery.setdefault(entry.source_label, _embed_path(recognizer, src_path))
                except MetricError as exc:
                    warnings.append(f"{entry.name}: retrieval embedding failed: {exc}")
            else:
                warnings.append(f"{entry.name}: source image {entry.source_image} is missing")
        rows.append(row)

    distractor_embs: List[np.ndarray] = []
    for label, rel in manifest.distractors:
        p = resolve(rel)
        if p is None or not p.exists():
            warnings.append(f"distractor {label}: image {rel} is missing")
            continue
        distractor_embs.append(_embed_path(recognizer, p))

    retrieval = None
    counts = (0, 0)
    if queries and gallery:
        retrieval = id_retrieval(queries, sorted(gallery.items()), distractor_embs)
        counts = (len(queries), len(gallery) + len(distractor_embs))

    feature_values: Dict[str, object] = {}
    for name in ("fid", "lpips"):
        fn = feature_metric(name)
        if fn is None:
            feature_values[name] = "unavailable"
        elif gen_paths and ref_paths:
            feature_values[name] = float(fn(gen_paths, ref_paths))
        else:
            feature_values[name] = "unavailable"

    return EvalReport(
        rows=rows,
        retrieval=retrieval,
        retrieval_counts=counts,
        feature_values=feature_values,
        warnings=warnings,
    )


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_report_csv(path: str | os.PathLike, report: EvalReport) -> None:
    """Fixed-column CSV: one row per entry plus a trailing `mean` row.

    Per-entry rows leave id_retrieval/fid/lpips blank; the mean row carries
    metric means over scored rows (inf propagates), the retrieval rate, and
    either plug-in values or the literal string "unavailable".
    """
    with open(os.fspath(path), "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows:
            writer.writerow(
                [
                    row.name,
                    row.status,
                    _fmt(row.csim),
                    _fmt(row.pose_err),
                    _fmt(row.exp_err),
                    _fmt(row.gaze_err),
                    _fmt(row.psnr),
                    "",
                    "",
                    "",
                ]
            )
        ok = sum(1 for r in report.rows if r.status == "ok")
        fid = report.feature_values.get("fid", "unavailable")
        lpips = report.feature_values.get("lpips", "unavailable")
        writer.writerow(
            [
                "mean",
                f"ok:{ok}/{len(report.rows)}",
                _fmt(report.mean("csim")),
                _fmt(report.mean("pose_err")),
                _fmt(report.mean("exp_err")),
                _fmt(report.mean("gaze_err")),
                _fmt(report.mean("psnr")),
                _fmt(report.retrieval) if report.retrieval is not None else "",
                fid if isinstance(fid, str) else repr(fid),
                lpips if isinstance(lpips, str) else repr(lpips),
            ]
        )
