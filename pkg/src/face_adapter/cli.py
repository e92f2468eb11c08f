"""Command-line front end: prepare / train / infer / eval.

Exit codes: 0 on success, 2 for data problems (unreadable frames, missing
sidecars, bad checkpoints), 64 for usage problems (bad flags, unknown or
invalid config keys). Evaluation returns 0 even when entries are skipped;
skips are printed as warnings.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .adapter import AdapterModules, load_checkpoint, audit_trainable_set
from .config import (
    RunConfig,
    SamplingConfig,
    apply_overrides,
    load_config,
    toy_run_config,
    validate_config,
)
from .data import CorpusManifest, FrameRecord, ingest_dataset, save_manifest
from .errors import ConfigurationError, FaceAdapterError, IngestionError
from .identity import ToyFaceRecognizer
from .imaging import load_image, load_mask, save_image, save_mask
from .metrics import evaluate_run, load_eval_manifest, write_report_csv
from .morphable import default_toy_model, load_coefficients, save_coefficients, save_model
from .pipelines import reenact, swap
from .synthetic import MODEL_FILENAME, generate_corpus
from .training import run_adapter_training, train_mask_predictors

EX_OK = 0
EX_DATA = 2
EX_USAGE = 64


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exit code 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def sidecar_coefficients(image_path: Path) -> Path:
    return image_path.with_name(image_path.stem + ".coeffs.txt")


def _load_frame_with_coeffs(path: Path, resolution: int):
    image = load_image(path)
    if image.shape[0] != resolution or image.shape[1] != resolution:
        from .imaging import resize_image

        image = resize_image(image, (resolution, resolution))
    sidecar = sidecar_coefficients(path)
    if not sidecar.exists():
        raise IngestionError(
            f"no coefficients sidecar for {path} (expected {sidecar}); "
            "write one with the documented text format or point --target at a .coeffs.txt file"
        )
    return image, load_coefficients(sidecar)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def _ingest_raw(source_dir: Path) -> int:
    """Validate a hand-built corpus layout and write its manifest."""
    problems: List[str] = []
    identities = {}
    ident_dirs = sorted(p for p in source_dir.iterdir() if p.is_dir())
    if not ident_dirs:
        print(f"error: {source_dir} contains no identity directories", file=sys.stderr)
        return EX_DATA
    resolution = None
    for ident in ident_dirs:
        records = []
        frames = sorted(
            p
            for p in ident.glob("*.png")
            if not (p.stem.endswith("_head") or p.stem.endswith("_face"))
        )
        for frame in frames:
            head = frame.with_name(frame.stem + "_head.png")
            face = frame.with_name(frame.stem + "_face.png")
            coeffs = sidecar_coefficients(frame)
            try:
                image = load_image(frame)
                if resolution is None:
                    resolution = image.shape[0]
                for mask_path in (head, face):
                    if not mask_path.exists():
                        raise IngestionError(f"missing mask {mask_path.name}")
                    mask = load_mask(mask_path)
                    if mask.shape != image.shape[:2]:
                        raise IngestionError(
                            f"mask {mask_path.name} shape {mask.shape} != frame shape {image.shape[:2]}"
                        )
                if not coeffs.exists():
                    raise IngestionError(f"missing coefficients {coeffs.name}")
                load_coefficients(coeffs)
            except (FaceAdapterError, OSError) as exc:
                problems.append(f"{ident.name}/{frame.name}: {exc}")
                continue
            records.append(
                FrameRecord(
                    frame=str(frame.relative_to(source_dir)),
                    coefficients=str(coeffs.relative_to(source_dir)),
                    head_mask=str(head.relative_to(source_dir)),
                    face_mask=str(face.relative_to(source_dir)),
                )
            )
        if records:
            identities[ident.name] = records
    if problems:
        for p in problems:
            print(f"error: {p}", file=sys.stderr)
        print(f"ingest failed: {len(problems)} unusable frame(s)", file=sys.stderr)
        return EX_DATA
    if not identities:
        print("error: no usable frames found", file=sys.stderr)
        return EX_DATA
    model_path = source_dir / MODEL_FILENAME
    if not model_path.exists():
        save_model(model_path, default_toy_model())
    manifest = CorpusManifest(
        root=source_dir,
        resolution=int(resolution),
        model_path=MODEL_FILENAME,
        identities=identities,
    )
    save_manifest(source_dir / "manifest.json", manifest)
    n = sum(len(v) for v in identities.values())
    print(f"manifest: {source_dir / 'manifest.json'} ({len(identities)} identities, {n} frames)")
    return EX_OK


def cmd_prepare(args) -> int:
    if args.synthetic == (args.source_dir is not None):
        raise UsageError("prepare needs exactly one of --synthetic or --source-dir")
    if args.source_dir is not None:
        existing = Path(args.source_dir) / "manifest.json"
        if existing.exists() and not args.force:
            print(f"manifest: {existing} already present, skipping (use --force to re-ingest)")
            return EX_OK
        return _ingest_raw(Path(args.source_dir))
    if args.out is None:
        raise UsageError("--synthetic requires --out")
    existing = Path(args.out) / "manifest.json"
    if existing.exists() and not args.force:
        print(f"manifest: {existing} already present, skipping (use --force to regenerate)")
        return EX_OK
    cfg = load_config(args.config) if args.config else toy_run_config()
    if args.set:
        apply_overrides(cfg, args.set)
    c = cfg.corpus
    identities = args.identities if args.identities is not None else c.identities
    frames = args.frames if args.frames is not None else c.frames
    resolution = args.resolution if args.resolution is not None else c.resolution
    seed = args.seed if args.seed is not None else c.seed
    if identities <= 0 or frames <= 0 or resolution <= 0:
        raise UsageError("--identities, --frames, and --resolution must be positive")
    manifest_path = generate_corpus(Path(args.out), identities, frames, resolution, seed)
    print(f"corpus: {args.out} ({identities} identities x {frames} frames at {resolution}px)")
    print(f"manifest: {manifest_path} ({identities * frames} entries)")
    return EX_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _resolve_run_paths(args, cfg: RunConfig):
    config_dir = Path(args.config).resolve().parent
    workspace = (config_dir / cfg.workspace).resolve()
    manifest = Path(args.manifest) if args.manifest else workspace / cfg.corpus_dir / "manifest.json"
    out_dir = Path(args.out) if args.out else workspace / cfg.output_dir
    return manifest, out_dir


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.set:
        apply_overrides(cfg, args.set)
    validate_config(cfg)
    manifest_path, out_dir = _resolve_run_paths(args, cfg)
    sampler = ingest_dataset(manifest_path, cfg.model.resolution)

    start_step = 0
    optimizer_state = None
    mask_trained = False
    if args.resume:
        modules, info = load_checkpoint(args.resume)
        start_step = info["step"]
        optimizer_state = info["optimizer_state"]
        mask_trained = info["mask_trained"]
        if start_step >= cfg.training.steps:
            raise ConfigurationError(
                f"resume checkpoint is at step {start_step}, but training.steps is {cfg.training.steps}"
            )
        print(f"resuming from {args.resume} at step {start_step}")
    else:
        modules = AdapterModules(cfg.model, morphable=sampler.morphable)

    counts = audit_trainable_set(modules)
    total = sum(counts.values())
    print("trainable set: " + ", ".join(f"{k}={v}" for k, v in counts.items()) + f" (total {total})")

    if not mask_trained and cfg.training.mask_steps > 0:
        mask_losses = train_mask_predictors(modules, sampler, cfg.training)
        for task, losses in mask_losses.items():
            print(f"mask predictor [{task}]: loss {losses[0]:.4f} -> {losses[-1]:.4f} over {len(losses)} steps")

    every = max(1, cfg.training.steps // 10)

    def progress(step: int, loss: float) -> None:
        if not args.quiet and (step % every == 0 or step + 1 == cfg.training.steps):
            print(f"step {step:6d}  loss {loss:.6f}")

    result = run_adapter_training(
        modules,
        sampler,
        cfg.training,
        out_dir,
        start_step=start_step,
        optimizer_state=optimizer_state,
        progress=progress,
    )
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"loss trace: {out_dir / 'loss.csv'}")
    return EX_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def cmd_infer(args) -> int:
    modules, _info = load_checkpoint(args.checkpoint)
    resolution = modules.config.resolution
    sampling = SamplingConfig(steps=args.steps, guidance_scale=args.guidance, seed=args.seed)
    if sampling.steps <= 0 or sampling.guidance_scale <= 0:
        raise UsageError("--steps and --guidance must be positive")

    source_path = Path(args.source)
    source_image, source_coeffs = _load_frame_with_coeffs(source_path, resolution)
    target_path = Path(args.target)

    if args.task == "reenact":
        if target_path.suffix == ".txt":
            target_coeffs = load_coefficients(target_path)
        else:
            _, target_coeffs = _load_frame_with_coeffs(target_path, resolution)
        result = reenact(source_image, source_coeffs, target_coeffs, modules, sampling)
    else:
        if target_path.suffix == ".txt":
            raise UsageError("swap needs a target image, not a coefficients file")
        if source_path.resolve() == target_path.resolve():
            print("warning: swap source and target are the same file (degenerate self-swap)", file=sys.stderr)
        target_image, target_coeffs = _load_frame_with_coeffs(target_path, resolution)
        result = swap(source_image, source_coeffs, target_image, target_coeffs, modules, sampling)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(out_path, result.image)
    stem = out_path.with_suffix("")
    save_mask(Path(str(stem) + ".mask.png"), result.mask.binarized())
    save_coefficients(Path(str(stem) + ".coeffs.txt"), result.driving_coefficients)
    meta = dict(result.metadata)
    meta["checkpoint"] = Path(args.checkpoint).name
    meta["source"] = source_path.name
    meta["target"] = target_path.name
    with open(Path(str(stem) + ".meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"output: {out_path}")
    return EX_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    manifest = load_eval_manifest(args.manifest)
    recognizer = ToyFaceRecognizer(seed=909)  # held-out embedding space, not the training one
    report = evaluate_run(manifest, recognizer)
    write_report_csv(args.out, report)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    ok = sum(1 for r in report.rows if r.status == "ok")
    print(f"report: {args.out} ({ok}/{len(report.rows)} entries ok, {len(report.warnings)} warnings)")
    for metric in ("csim", "psnr", "pose_err", "exp_err", "gaze_err"):
        value = report.mean(metric)
        if value is not None:
            print(f"mean {metric}: {value}")
    if report.retrieval is not None:
        q, g = report.retrieval_counts
        print(f"id_retrieval: {report.retrieval} ({q} queries, gallery size {g})")
    return EX_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="face-adapter", description="Face reenactment and swapping with a frozen denoiser")
    parser.add_argument("--version", action="version", version=f"face-adapter {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("prepare", help="generate a synthetic corpus or ingest a raw one")
    p.add_argument("--out", help="output directory for a synthetic corpus")
    p.add_argument("--synthetic", action="store_true", help="generate the procedural corpus")
    p.add_argument("--source-dir", help="ingest an existing identity/frame directory tree")
    p.add_argument("--config", help="run config YAML (corpus section supplies defaults)")
    p.add_argument("--identities", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="rebuild outputs that already exist")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train mask predictors and adapters on a corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", help="corpus manifest (default: <workspace>/<corpus_dir>/manifest.json)")
    p.add_argument("--out", help="run directory (default: <workspace>/<output_dir>)")
    p.add_argument("--resume", help="checkpoint to resume adapter training from")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run reenactment or swapping from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=("reenact", "swap"))
    p.add_argument("--source", required=True, help="source frame PNG (coefficients sidecar required)")
    p.add_argument(
        "--target",
        required=True,
        help="target frame PNG with sidecar, or a .coeffs.txt file (reenact only)",
    )
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--guidance", type=float, default=3.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score generated outputs against references")
    p.add_argument("--manifest", required=True, help="eval manifest JSON")
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_USAGE
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_USAGE
    except (FaceAdapterError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_DATA


if __name__ == "__main__":
    sys.exit(main())
