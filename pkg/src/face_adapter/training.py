"""Two-task training stream, condition dropping, and the optimization loop.

Every optimizer step draws its batch from per-(seed, step, slot) numpy
generators, so a run is a pure function of (corpus, config, root seed): the
loop can be killed at any checkpoint and resumed to a bit-identical final
state. Per example the generator is consumed in a fixed order: pair draw,
task draw, drop draw, noise draw, timestep draw.

The denoising loss only ever updates adapters (mappers, control branch,
optionally the vision encoder). The frozen backbone is asserted frozen at
the start of every run and is trivial to re-audit afterwards because its
state digest must not move.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .adapter import AdapterModules, audit_trainable_set, save_checkpoint
from .attribute import (
    SpatialControl,
    attribute_to_tokens,
    compose_spatial_control,
    extract_attribute_embeddings,
    null_attribute_tokens,
)
from .config import TrainingConfig
from .data import PairSampler, TrainingPair
from .diffusion import add_noise, spatial_to_tensor
from .errors import ContractViolationError
from .identity import extract_face_embedding, identity_to_tokens, null_identity_tokens
from .mappers import TokenSequence, concat_context
from .masks import AdaptingMask, Task, build_gt_mask_reenact, build_gt_mask_swap, default_dilation_radius, train_area_predictor
from .morphable import landmarks_for, recombine_coefficients, render_landmark_image


class DropRecord(enum.Enum):
    NONE = "none"
    ATTR_ONLY = "attr_only"
    BOTH = "both"


def sample_task(rng: np.random.Generator, reenact_prob: float = 0.5) -> Task:
    """50/50 task stream by default (one uniform draw)."""
    if not (0.0 <= reenact_prob <= 1.0):
        raise ContractViolationError(f"reenact_prob must be in [0, 1], got {reenact_prob}")
    return Task.REENACT if rng.random() < reenact_prob else Task.SWAP


def draw_drop_record(
    rng: np.random.Generator, p_both: float = 0.05, p_attr: float = 0.45
) -> DropRecord:
    """Single uniform draw partitioned into both-null / attr-null / keep."""
    if p_both < 0 or p_attr < 0 or p_both + p_attr > 1.0:
        raise ContractViolationError(f"invalid drop probabilities ({p_both}, {p_attr})")
    u = rng.random()
    if u < p_both:
        return DropRecord.BOTH
    if u < p_both + p_attr:
        return DropRecord.ATTR_ONLY
    return DropRecord.NONE


def drop_conditions(
    id_tokens: TokenSequence,
    attr_tokens: TokenSequence,
    rng: np.random.Generator,
    null_id: TokenSequence,
    null_attr: TokenSequence,
    p_both: float = 0.05,
    p_attr: float = 0.45,
) -> Tuple[TokenSequence, TokenSequence, DropRecord]:
    """Apply the classifier-free-guidance dropping scheme to one example."""
    record = draw_drop_record(rng, p_both, p_attr)
    if record is DropRecord.BOTH:
        return null_id, null_attr, record
    if record is DropRecord.ATTR_ONLY:
        return id_tokens, null_attr, record
    return id_tokens, attr_tokens, record


@dataclass
class ConditionedExample:
    """One fully conditioned training example, ready to collate."""

    x0: torch.Tensor  # (3, H, W)
    eps: torch.Tensor
    t: int
    id_tokens: TokenSequence
    attr_tokens: TokenSequence
    spatial: SpatialControl
    task: Task
    drop: DropRecord


def build_training_example(
    pair: TrainingPair,
    task: Task,
    modules: AdapterModules,
    rng: np.random.Generator,
    p_both: float = 0.05,
    p_attr: float = 0.45,
) -> ConditionedExample:
    """Assemble conditions, noise draw, and timestep for one pair + task.

    Reenactment: spatial background comes from the source frame (masked by
    the dilated head union), the attribute template is the source frame, and
    the denoised target is the target frame. Swapping: background and
    attribute template are the target frame, masked by its dilated face
    region. Identity tokens always come from the source frame. The landmark
    image always renders the recombined coefficients (source identity under
    target motion).
    """
    resolution = pair.target_image.shape[0]
    recombined = recombine_coefficients(pair.source_coeffs, pair.target_coeffs)
    lmk = landmarks_for(recombined, modules.morphable, (resolution, resolution))
    lmk_image = render_landmark_image(lmk, modules.render_style)
    radius = default_dilation_radius(resolution)

    if task is Task.REENACT:
        mask = build_gt_mask_reenact(pair.source_head, pair.target_head, radius)
        background = pair.source_image
        template = pair.source_image
    else:
        mask = build_gt_mask_swap(pair.target_face, radius)
        background = pair.target_image
        template = pair.target_image
    spatial = compose_spatial_control(background, mask, lmk_image)

    drop = draw_drop_record(rng, p_both, p_attr)
    if drop is DropRecord.BOTH:
        id_tokens = null_identity_tokens(modules.id_mapper)
    else:
        embedding = extract_face_embedding(modules.recognizer, pair.source_image)
        id_tokens = identity_to_tokens(modules.id_mapper, embedding)
    if drop is DropRecord.NONE:
        features = extract_attribute_embeddings(modules.vision_encoder, template)
        attr_tokens = attribute_to_tokens(modules.attr_mapper, features)
    else:
        attr_tokens = null_attribute_tokens(modules.attr_mapper)

    x0 = modules.codec.encode(pair.target_image)
    eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape)).astype(np.float32))
    t = int(rng.integers(0, modules.schedule.timesteps))
    return ConditionedExample(
        x0=x0, eps=eps, t=t, id_tokens=id_tokens, attr_tokens=attr_tokens,
        spatial=spatial, task=task, drop=drop,
    )


def training_step(
    examples: Sequence[ConditionedExample],
    modules: AdapterModules,
    optimizer: torch.optim.Optimizer,
) -> float:
    """One denoising-MSE optimizer step over a collated batch."""
    if not examples:
        raise ContractViolationError("training step needs at least one example")
    x0 = torch.stack([ex.x0 for ex in examples])
    eps = torch.stack([ex.eps for ex in examples])
    t = torch.tensor([ex.t for ex in examples], dtype=torch.long)
    context = torch.stack([concat_context(ex.id_tokens, ex.attr_tokens) for ex in examples])
    spatial = torch.cat([spatial_to_tensor(ex.spatial) for ex in examples])

    x_t = add_noise(x0, eps, t, modules.schedule)
    residuals = modules.control_branch(x_t, t, context, spatial)
    pred = modules.backbone(x_t, t, context, residuals)
    loss = F.mse_loss(pred, eps)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    value = float(loss.detach())
    if not np.isfinite(value):
        raise ContractViolationError(f"training loss became non-finite: {value}")
    return value


@dataclass
class LossRow:
    step: int
    loss: float
    task: str
    drop_record: str


def write_loss_csv(path: str | os.PathLike, rows: Sequence[LossRow], append: bool = False) -> None:
    mode = "a" if append and os.path.exists(path) else "w"
    with open(os.fspath(path), mode, newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "task", "drop_record"])
        for row in rows:
            writer.writerow([row.step, repr(row.loss), row.task, row.drop_record])


@dataclass
class TrainingResult:
    final_checkpoint: Path
    checkpoints: List[Path]
    loss_rows: List[LossRow]
    mask_losses: Dict[str, List[float]] = field(default_factory=dict)


def make_mask_dataset(
    sampler: PairSampler,
    modules: AdapterModules,
    task: Task,
    n_pairs: int,
    seed: int,
) -> List[Tuple[np.ndarray, np.ndarray, AdaptingMask]]:
    """Supervision triples for one task's area predictor.

    The input frame is the target frame (training-time convention; at
    inference the reenactment head sees the source frame instead), the
    landmark image renders the recombined coefficients, and the target mask
    is the task's ground-truth construction.
    """
    triples = []
    for k in range(n_pairs):
        rng = np.random.default_rng([seed, 7000 + k])
        pair = sampler.sample_pair(rng)
        resolution = pair.target_image.shape[0]
        recombined = recombine_coefficients(pair.source_coeffs, pair.target_coeffs)
        lmk_image = render_landmark_image(
            landmarks_for(recombined, modules.morphable, (resolution, resolution)),
            modules.render_style,
        )
        radius = default_dilation_radius(resolution)
        if task is Task.REENACT:
            gt = build_gt_mask_reenact(pair.source_head, pair.target_head, radius)
        else:
            gt = build_gt_mask_swap(pair.target_face, radius)
        triples.append((pair.target_image, lmk_image, gt))
    return triples


def train_mask_predictors(
    modules: AdapterModules,
    sampler: PairSampler,
    cfg: TrainingConfig,
) -> Dict[str, List[float]]:
    """Phase 1: fit both area predictors on ground-truth masks."""
    out: Dict[str, List[float]] = {}
    if cfg.mask_steps <= 0:
        return out
    for task, head in (
        (Task.REENACT, modules.area_predictor_reenact),
        (Task.SWAP, modules.area_predictor_swap),
    ):
        dataset = make_mask_dataset(modules=modules, sampler=sampler, task=task, n_pairs=cfg.mask_pairs, seed=cfg.seed)
        out[task.value] = train_area_predictor(
            head, dataset, steps=cfg.mask_steps, lr=cfg.mask_lr, batch_size=cfg.batch_size, seed=cfg.seed
        )
    return out


def run_adapter_training(
    modules: AdapterModules,
    sampler: PairSampler,
    cfg: TrainingConfig,
    out_dir: str | os.PathLike,
    start_step: int = 0,
    optimizer_state: Optional[dict] = None,
    progress: Optional[Callable[[int, float], None]] = None,
) -> TrainingResult:
    """Phase 2: the denoising-loss loop, with periodic resumable checkpoints."""
    out_path = Path(os.fspath(out_dir))
    out_path.mkdir(parents=True, exist_ok=True)
    if not (0 <= start_step <= cfg.steps):
        raise ContractViolationError(f"start step {start_step} outside [0, {cfg.steps}]")

    optimizer = torch.optim.AdamW(
        modules.adapter_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    audit_trainable_set(modules, optimizer)
    modules.set_train(True)

    rows: List[LossRow] = []
    checkpoints: List[Path] = []
    for step in range(start_step, cfg.steps):
        examples = []
        for slot in range(cfg.batch_size):
            rng = np.random.default_rng([cfg.seed, step, slot])
            pair = sampler.sample_pair(rng)
            task = sample_task(rng, cfg.reenact_prob)
            examples.append(
                build_training_example(pair, task, modules, rng, cfg.drop_both, cfg.drop_attr)
            )
        loss = training_step(examples, modules, optimizer)
        rows.append(
            LossRow(
                step=step,
                loss=loss,
                task="|".join(ex.task.value for ex in examples),
                drop_record="|".join(ex.drop.value for ex in examples),
            )
        )
        if progress is not None:
            progress(step, loss)
        done = step + 1
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
            ckpt = out_path / f"checkpoint_step_{done:06d}.pt"
            save_checkpoint(ckpt, modules, done, cfg.seed, optimizer, mask_trained=True)
            checkpoints.append(ckpt)

    modules.set_train(False)
    final = out_path / "checkpoint_final.pt"
    save_checkpoint(final, modules, cfg.steps, cfg.seed, optimizer, mask_trained=True)
    checkpoints.append(final)
    write_loss_csv(out_path / "loss.csv", rows, append=start_step > 0)
    return TrainingResult(final_checkpoint=final, checkpoints=checkpoints, loss_rows=rows)
