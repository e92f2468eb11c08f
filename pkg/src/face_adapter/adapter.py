"""The bundle of everything one run needs, plus the checkpoint container.

Construction is a pure function of (ModelConfig, morphable model): the frozen
backbone and both toy encoders are rebuilt from seeds, so checkpoints carry
adapter weights only, alongside the config and the blendshape arrays. A
checkpoint therefore fully determines inference behavior, and loading one
into a mismatched architecture fails loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from typing import Dict, Iterable, List, Optional

import torch
import torch.nn as nn

from .attribute import ControlBranch, ToyVisionEncoder
from .config import ModelConfig
from .diffusion import NoiseSchedule, PixelSpaceCodec, ToyDenoiser
from .errors import CheckpointError, ContractViolationError
from .identity import ToyFaceRecognizer
from .mappers import TokenMapper
from .masks import SegmentationHead, Task
from .morphable import MorphableModel, RenderStyle, default_toy_model
from .torch_utils import state_fingerprint

ARCHITECTURE_VERSION = 1
CHECKPOINT_FORMAT = "face-adapter-checkpoint"

# stable seed offsets per module; config.seed shifts them all together
_SEED_OFFSETS = {
    "backbone": 11,
    "id_mapper": 13,
    "attr_mapper": 17,
    "control_branch": 19,
    "vision_encoder": 23,
    "area_predictor_reenact": 29,
    "area_predictor_swap": 31,
}


def _module_seed(base: int, name: str) -> int:
    return base * 1000 + _SEED_OFFSETS[name]


def config_digest(config: ModelConfig) -> str:
    payload = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


class AdapterModules:
    """Frozen backbone + every adapter, wired and seeded from one config."""

    def __init__(self, config: ModelConfig, morphable: Optional[MorphableModel] = None):
        self.config = config
        self.morphable = morphable if morphable is not None else default_toy_model()
        self.render_style = RenderStyle()
        self.schedule = NoiseSchedule.linear(config.timesteps, config.beta_start, config.beta_end)
        self.codec = PixelSpaceCodec()

        base = config.seed
        self.backbone = ToyDenoiser(
            self.schedule,
            base_channels=config.base_channels,
            context_dim=config.token_dim,
            seed=_module_seed(base, "backbone"),
        )
        self.id_mapper = TokenMapper(
            config.face_embed_dim,
            n_tokens=config.token_count,
            token_dim=config.token_dim,
            n_layers=config.mapper_layers,
            heads=config.mapper_heads,
            seed=_module_seed(base, "id_mapper"),
        )
        self.attr_mapper = TokenMapper(
            config.vision_dim,
            n_tokens=config.token_count,
            token_dim=config.token_dim,
            n_layers=config.mapper_layers,
            heads=config.mapper_heads,
            seed=_module_seed(base, "attr_mapper"),
        )
        self.vision_encoder = ToyVisionEncoder(
            dim=config.vision_dim,
            input_size=config.vision_input,
            grid=config.vision_grid,
            seed=_module_seed(base, "vision_encoder"),
        )
        self.vision_encoder.requires_grad_(config.finetune_vision)
        self.control_branch = ControlBranch(self.backbone, seed=_module_seed(base, "control_branch"))
        self.area_predictor_reenact = SegmentationHead(
            Task.REENACT, seed=_module_seed(base, "area_predictor_reenact")
        )
        self.area_predictor_swap = SegmentationHead(
            Task.SWAP, seed=_module_seed(base, "area_predictor_swap")
        )
        # the recognizer plays "pretrained face model": fixed seed, no params
        self.recognizer = ToyFaceRecognizer(embed_dim=config.face_embed_dim, seed=101)

    # -- trainability bookkeeping -------------------------------------------------

    def trainable_modules(self) -> Dict[str, nn.Module]:
        """Every module that training may update, by stable name.

        The backbone and the recognizer are deliberately absent; the vision
        encoder appears only when fine-tuning it is enabled.
        """
        out: Dict[str, nn.Module] = {
            "id_mapper": self.id_mapper,
            "attr_mapper": self.attr_mapper,
            "control_branch": self.control_branch,
            "area_predictor_reenact": self.area_predictor_reenact,
            "area_predictor_swap": self.area_predictor_swap,
        }
        if self.config.finetune_vision:
            out["vision_encoder"] = self.vision_encoder
        return out

    def denoise_trainable(self) -> Dict[str, nn.Module]:
        """The subset updated by the denoising loss (mask heads train separately)."""
        out = {k: v for k, v in self.trainable_modules().items() if not k.startswith("area_predictor")}
        return out

    def adapter_parameters(self) -> List[torch.nn.Parameter]:
        params: List[torch.nn.Parameter] = []
        for module in self.denoise_trainable().values():
            params.extend(p for p in module.parameters() if p.requires_grad)
        return params

    def backbone_fingerprint(self) -> bytes:
        return state_fingerprint(self.backbone)

    def set_train(self, training: bool) -> None:
        for module in self.trainable_modules().values():
            module.train(training)
        # the frozen backbone stays in eval mode permanently

    # -- checkpoint container -----------------------------------------------------

    def state_payload(self) -> Dict[str, Dict[str, torch.Tensor]]:
        stateful = dict(self.trainable_modules())
        stateful.setdefault("vision_encoder", self.vision_encoder)  # keep weights even when frozen
        return {name: module.state_dict() for name, module in sorted(stateful.items())}

    def load_state_payload(self, payload: Dict[str, Dict[str, torch.Tensor]]) -> None:
        stateful = dict(self.trainable_modules())
        stateful.setdefault("vision_encoder", self.vision_encoder)
        expected = sorted(stateful)
        got = sorted(payload)
        if expected != got:
            raise CheckpointError(f"adapter state keys {got} do not match architecture {expected}")
        for name in expected:
            try:
                stateful[name].load_state_dict(payload[name], strict=True)
            except RuntimeError as exc:
                raise CheckpointError(f"adapter state for {name!r} does not fit: {exc}") from exc


def _morphable_payload(model: MorphableModel) -> Dict[str, torch.Tensor]:
    return {
        "mean": torch.from_numpy(model.mean.copy()),
        "identity_basis": torch.from_numpy(model.identity_basis.copy()),
        "expression_basis": torch.from_numpy(model.expression_basis.copy()),
        "landmarks": torch.from_numpy(model.landmarks.copy()),
    }


def _morphable_from_payload(payload: Dict[str, torch.Tensor]) -> MorphableModel:
    return MorphableModel(
        mean=payload["mean"].numpy(),
        identity_basis=payload["identity_basis"].numpy(),
        expression_basis=payload["expression_basis"].numpy(),
        landmarks=payload["landmarks"].numpy(),
    )


def save_checkpoint(
    path: str | os.PathLike,
    modules: AdapterModules,
    step: int,
    root_seed: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
    mask_trained: bool = False,
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "architecture_version": ARCHITECTURE_VERSION,
        "model_config": dataclasses.asdict(modules.config),
        "config_digest": config_digest(modules.config),
        "backbone_ref": {"kind": "toy", "seed": _module_seed(modules.config.seed, "backbone")},
        "morphable": _morphable_payload(modules.morphable),
        "adapter_state": modules.state_payload(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "root_seed": int(root_seed),
        "mask_trained": bool(mask_trained),
    }
    torch.save(payload, os.fspath(path))


def load_checkpoint(path: str | os.PathLike) -> tuple[AdapterModules, dict]:
    """Rebuild modules from a checkpoint; returns (modules, resume info).

    Raises CheckpointError when the container tag, architecture version, or
    state shapes do not match this code.
    """
    try:
        payload = torch.load(os.fspath(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"checkpoint {path} missing container tag {CHECKPOINT_FORMAT!r}")
    version = payload.get("architecture_version")
    if version != ARCHITECTURE_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has architecture version {version!r}, this build requires {ARCHITECTURE_VERSION}"
        )
    try:
        config = ModelConfig(**payload["model_config"])
    except TypeError as exc:
        raise CheckpointError(f"checkpoint {path} has an incompatible model config: {exc}") from exc
    morphable = _morphable_from_payload(payload["morphable"])
    modules = AdapterModules(config, morphable=morphable)
    modules.load_state_payload(payload["adapter_state"])
    info = {
        "step": int(payload.get("step", 0)),
        "root_seed": int(payload.get("root_seed", 0)),
        "optimizer_state": payload.get("optimizer_state"),
        "mask_trained": bool(payload.get("mask_trained", False)),
        "config_digest": payload.get("config_digest"),
    }
    return modules, info


def audit_trainable_set(modules: AdapterModules, optimizer: Optional[torch.optim.Optimizer] = None) -> Dict[str, int]:
    """Assert the frozen/trainable split is exactly as documented.

    Returns {module name: parameter count} for the trainable set (handy for
    logs). Raises ContractViolationError if any backbone parameter requires
    grad or sneaked into the optimizer, or if a trainable module is fully
    frozen.
    """
    for name, p in modules.backbone.named_parameters():
        if p.requires_grad:
            raise ContractViolationError(f"backbone parameter {name} requires grad")
    counts: Dict[str, int] = {}
    for name, module in sorted(modules.trainable_modules().items()):
        n = sum(p.numel() for p in module.parameters())
        if not any(p.requires_grad for p in module.parameters()):
            raise ContractViolationError(f"trainable module {name} has no grad-enabled parameters")
        counts[name] = n
    if not modules.config.finetune_vision:
        if any(p.requires_grad for p in modules.vision_encoder.parameters()):
            raise ContractViolationError("vision encoder requires grad despite finetune_vision=false")
    if optimizer is not None:
        opt_ids = {id(p) for group in optimizer.param_groups for p in group["params"]}
        backbone_ids = {id(p) for p in modules.backbone.parameters()}
        if opt_ids & backbone_ids:
            raise ContractViolationError("optimizer contains frozen backbone parameters")
        allowed = {id(p) for p in modules.adapter_parameters()}
        mask_params = {
            id(p)
            for head in (modules.area_predictor_reenact, modules.area_predictor_swap)
            for p in head.parameters()
        }
        if not opt_ids <= (allowed | mask_params):
            raise ContractViolationError("optimizer contains parameters outside the trainable set")
    return counts
