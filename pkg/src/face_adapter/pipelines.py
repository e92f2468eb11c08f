"""Reenactment and swapping, sharing one generation path.

Both tasks reduce to the same plan: render landmarks for recombined
coefficients, predict the adapting area, compose the spatial control from the
appropriate background, map identity/attribute conditions to tokens, pick the
negative (guidance) conditions, sample, and blend the generated pixels back
into the untouched background through the binarized mask. Only the per-task
choices differ, so the executor is one function and the task wrappers only
assemble plans.

Negative conditions follow the guidance convention the tasks were trained
for: reenactment pushes away from the fully unconditional pair (null, null);
swapping pushes away from the *target's* identity tokens (null attribute), so
guidance actively steers identity away from the person being replaced.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .adapter import AdapterModules
from .attribute import (
    SpatialControl,
    attribute_to_tokens,
    compose_spatial_control,
    extract_attribute_embeddings,
    null_attribute_tokens,
)
from .config import SamplingConfig
from .diffusion import SampleConditions, sample
from .errors import ContractViolationError
from .identity import extract_face_embedding, identity_to_tokens, null_identity_tokens
from .mappers import TokenSequence
from .masks import AdaptingMask, Task, predict_adapting_area
from .morphable import FaceCoefficients, landmarks_for, recombine_coefficients, render_landmark_image


@dataclass(frozen=True)
class GenerationPlan:
    """Everything the executor needs, already resolved per task."""

    task: Task
    background: np.ndarray
    landmark_image: np.ndarray
    mask: AdaptingMask
    spatial: SpatialControl
    id_tokens: TokenSequence
    attr_tokens: TokenSequence
    neg_id_tokens: TokenSequence
    neg_attr_tokens: TokenSequence
    driving_coefficients: FaceCoefficients


@dataclass(frozen=True)
class GenerationResult:
    image: np.ndarray          # blended output (background exact outside mask)
    raw_image: np.ndarray      # decoded sample before blending
    mask: AdaptingMask
    spatial: SpatialControl
    driving_coefficients: FaceCoefficients
    task: Task
    metadata: Dict[str, object]


def _check_frame(image: np.ndarray, resolution: int, name: str) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractViolationError(f"{name} must be (H, W, 3), got {arr.shape}")
    if arr.shape[0] != resolution or arr.shape[1] != resolution:
        raise ContractViolationError(
            f"{name} resolution {arr.shape[:2]} does not match model resolution {resolution}"
        )
    return arr


def build_reenact_plan(
    source_image: np.ndarray,
    source_coeffs: FaceCoefficients,
    target_motion: FaceCoefficients,
    modules: AdapterModules,
) -> GenerationPlan:
    """Source appearance driven by target motion.

    The area predictor runs on the *source* frame here (it trained on target
    frames; this asymmetry is the deployment condition). Negative guidance is
    fully unconditional.
    """
    resolution = modules.config.resolution
    source_image = _check_frame(source_image, resolution, "source image")
    recombined = recombine_coefficients(source_coeffs, target_motion)
    lmk_image = render_landmark_image(
        landmarks_for(recombined, modules.morphable, (resolution, resolution)),
        modules.render_style,
    )
    mask = predict_adapting_area(modules.area_predictor_reenact, source_image, lmk_image)
    spatial = compose_spatial_control(source_image, mask, lmk_image)
    embedding = extract_face_embedding(modules.recognizer, source_image)
    return GenerationPlan(
        task=Task.REENACT,
        background=source_image,
        landmark_image=lmk_image,
        mask=mask,
        spatial=spatial,
        id_tokens=identity_to_tokens(modules.id_mapper, embedding),
        attr_tokens=attribute_to_tokens(
            modules.attr_mapper, extract_attribute_embeddings(modules.vision_encoder, source_image)
        ),
        neg_id_tokens=null_identity_tokens(modules.id_mapper),
        neg_attr_tokens=null_attribute_tokens(modules.attr_mapper),
        driving_coefficients=recombined,
    )


def build_swap_plan(
    source_image: np.ndarray,
    source_coeffs: FaceCoefficients,
    target_image: np.ndarray,
    target_coeffs: FaceCoefficients,
    modules: AdapterModules,
) -> GenerationPlan:
    """Source identity pasted into the target frame (conditional inpainting).

    Background, attribute template, and the area predictor's input frame are
    all the target frame. The negative identity condition is the target's own
    identity tokens.
    """
    resolution = modules.config.resolution
    source_image = _check_frame(source_image, resolution, "source image")
    target_image = _check_frame(target_image, resolution, "target image")
    if np.array_equal(source_coeffs.identity, target_coeffs.identity):
        warnings.warn(
            "swap source and target have identical identity coefficients; "
            "proceeding (degenerate self-swap)",
            stacklevel=2,
        )
    recombined = recombine_coefficients(source_coeffs, target_coeffs)
    lmk_image = render_landmark_image(
        landmarks_for(recombined, modules.morphable, (resolution, resolution)),
        modules.render_style,
    )
    mask = predict_adapting_area(modules.area_predictor_swap, target_image, lmk_image)
    spatial = compose_spatial_control(target_image, mask, lmk_image)
    source_embedding = extract_face_embedding(modules.recognizer, source_image)
    target_embedding = extract_face_embedding(modules.recognizer, target_image)
    return GenerationPlan(
        task=Task.SWAP,
        background=target_image,
        landmark_image=lmk_image,
        mask=mask,
        spatial=spatial,
        id_tokens=identity_to_tokens(modules.id_mapper, source_embedding),
        attr_tokens=attribute_to_tokens(
            modules.attr_mapper, extract_attribute_embeddings(modules.vision_encoder, target_image)
        ),
        neg_id_tokens=identity_to_tokens(modules.id_mapper, target_embedding),
        neg_attr_tokens=null_attribute_tokens(modules.attr_mapper),
        driving_coefficients=recombined,
    )


def execute_plan(
    plan: GenerationPlan, modules: AdapterModules, sampling: SamplingConfig
) -> GenerationResult:
    """Sample under the plan's conditions and blend into the background.

    The blend uses the binarized mask, so every pixel outside the adapting
    area is the background pixel bit-for-bit.
    """
    conditions = SampleConditions(
        id_tokens=plan.id_tokens,
        attr_tokens=plan.attr_tokens,
        neg_id_tokens=plan.neg_id_tokens,
        neg_attr_tokens=plan.neg_attr_tokens,
        spatial=plan.spatial,
    )
    raw = sample(
        modules.backbone,
        modules.control_branch,
        conditions,
        modules.schedule,
        modules.codec,
        resolution=modules.config.resolution,
        steps=sampling.steps,
        guidance_scale=sampling.guidance_scale,
        seed=sampling.seed,
    )
    m = plan.mask.binarized()[:, :, None]
    image = (raw * m + plan.background * (1.0 - m)).astype(np.float32)
    return GenerationResult(
        image=image,
        raw_image=raw,
        mask=plan.mask,
        spatial=plan.spatial,
        driving_coefficients=plan.driving_coefficients,
        task=plan.task,
        metadata={
            "task": plan.task.value,
            "steps": sampling.steps,
            "guidance_scale": sampling.guidance_scale,
            "seed": sampling.seed,
        },
    )


def reenact(
    source_image: np.ndarray,
    source_coeffs: FaceCoefficients,
    target_motion: FaceCoefficients,
    modules: AdapterModules,
    sampling: Optional[SamplingConfig] = None,
) -> GenerationResult:
    plan = build_reenact_plan(source_image, source_coeffs, target_motion, modules)
    return execute_plan(plan, modules, sampling or SamplingConfig())


def swap(
    source_image: np.ndarray,
    source_coeffs: FaceCoefficients,
    target_image: np.ndarray,
    target_coeffs: FaceCoefficients,
    modules: AdapterModules,
    sampling: Optional[SamplingConfig] = None,
) -> GenerationResult:
    plan = build_swap_plan(source_image, source_coeffs, target_image, target_coeffs, modules)
    return execute_plan(plan, modules, sampling or SamplingConfig())
