"""Run configuration: dataclasses, YAML round-trip, dotted overrides.

A run config has four sections (model, training, sampling, corpus) plus a
couple of top-level paths. Defaults describe the full-scale geometry (512 px
frames, 77 x 768 tokens); ``toy_run_config`` shrinks everything to the
desk-scale profile the tests and the synthetic corpus use.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from .errors import ConfigurationError

CACHE_ENV_VAR = "FACE_ADAPTER_CACHE"


def cache_dir() -> Optional[str]:
    """Directory for cacheable derived artifacts, or None when unset."""
    value = os.environ.get(CACHE_ENV_VAR, "").strip()
    return value or None


@dataclass
class ModelConfig:
    resolution: int = 512
    base_channels: int = 32
    token_count: int = 77
    token_dim: int = 768
    mapper_layers: int = 3
    mapper_heads: int = 8
    face_embed_dim: int = 512
    vision_dim: int = 64
    vision_input: int = 64
    vision_grid: int = 16
    finetune_vision: bool = True
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0


@dataclass
class TrainingConfig:
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.01
    mask_steps: int = 300
    mask_lr: float = 1e-3
    mask_pairs: int = 24
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    drop_both: float = 0.05
    drop_attr: float = 0.45
    reenact_prob: float = 0.5
    seed: int = 0


@dataclass
class SamplingConfig:
    steps: int = 20
    guidance_scale: float = 3.5
    seed: int = 0


@dataclass
class CorpusConfig:
    identities: int = 4
    frames: int = 6
    resolution: int = 64
    seed: int = 11


@dataclass
class RunConfig:
    workspace: str = "."
    corpus_dir: str = "corpus"
    output_dir: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)


def toy_run_config() -> RunConfig:
    """The desk-scale profile: 64 px frames, narrow tokens, small backbone.

    The schedule is shortened to 200 fat steps. A 1000-step schedule leaves
    alpha_bar near 4e-5 at the top, and the DDIM x0 prediction divides the
    noise-prediction error by sqrt(alpha_bar) there, which a desk-scale model
    trained for a few thousand steps cannot survive. 200 steps ending at
    beta 0.05 keeps that amplification near 12x while alpha_bar still decays
    to ~6e-3, close enough to the pure-noise start of sampling.
    """
    cfg = RunConfig()
    cfg.model.resolution = 64
    cfg.model.base_channels = 24
    cfg.model.token_dim = 128
    cfg.model.mapper_heads = 8
    cfg.model.timesteps = 200
    cfg.model.beta_start = 1e-3
    cfg.model.beta_end = 0.05
    cfg.corpus.resolution = 64
    return cfg


_SECTIONS = {
    "model": ModelConfig,
    "training": TrainingConfig,
    "sampling": SamplingConfig,
    "corpus": CorpusConfig,
}
_TOP_FIELDS = ("workspace", "corpus_dir", "output_dir")


def _coerce(value: Any, target_type: type, where: str) -> Any:
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigurationError(f"{where}: expected a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        try:
            if isinstance(value, str):
                return int(value, 0)
            if isinstance(value, int):
                return value
            if isinstance(value, float) and value.is_integer():
                return int(value)
        except ValueError:
            pass
        raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
    if target_type is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
    if target_type is str:
        if isinstance(value, (str, int, float)):
            return str(value)
        raise ConfigurationError(f"{where}: expected a string, got {value!r}")
    raise ConfigurationError(f"{where}: unsupported field type {target_type}")


def _fill_section(obj: Any, data: Dict[str, Any], section: str) -> None:
    fields = {f.name: f.type for f in dataclasses.fields(obj)}
    types = {"int": int, "float": float, "bool": bool, "str": str}
    for key, value in data.items():
        if key not in fields:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        ftype = types[fields[key]] if isinstance(fields[key], str) else fields[key]
        setattr(obj, key, _coerce(value, ftype, f"{section}.{key}"))


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError(f"config root must be a mapping, got {type(data).__name__}")
    cfg = RunConfig()
    for key, value in data.items():
        if key in _TOP_FIELDS:
            cfg_dict_value = _coerce(value, str, key)
            setattr(cfg, key, cfg_dict_value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"config section {key} must be a mapping")
            _fill_section(getattr(cfg, key), value, key)
        else:
            raise ConfigurationError(f"unknown config key {key}")
    validate_config(cfg)
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(os.fspath(path), "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data or {})


def save_config(path: str | os.PathLike, cfg: RunConfig) -> None:
    data = dataclasses.asdict(cfg)
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)


def apply_overrides(cfg: RunConfig, overrides: List[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (the CLI's --set flag)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        dotted, _, raw = item.partition("=")
        parts = dotted.strip().split(".")
        if len(parts) == 1 and parts[0] in _TOP_FIELDS:
            setattr(cfg, parts[0], raw)
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigurationError(f"override {item!r}: unknown key {dotted!r}")
        section, key = parts
        obj = getattr(cfg, section)
        fields = {f.name: f.type for f in dataclasses.fields(obj)}
        if key not in fields:
            raise ConfigurationError(f"override {item!r}: unknown key {dotted!r}")
        types = {"int": int, "float": float, "bool": bool, "str": str}
        ftype = types[fields[key]] if isinstance(fields[key], str) else fields[key]
        setattr(obj, key, _coerce(raw, ftype, dotted))
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    """Check cross-field consistency; collect every problem before raising."""
    problems: List[str] = []
    m, t, s, c = cfg.model, cfg.training, cfg.sampling, cfg.corpus
    if m.resolution <= 0 or m.resolution % 4 != 0:
        problems.append(f"model.resolution must be a positive multiple of 4, got {m.resolution}")
    if m.base_channels <= 0:
        problems.append(f"model.base_channels must be positive, got {m.base_channels}")
    if m.token_count <= 0:
        problems.append(f"model.token_count must be positive, got {m.token_count}")
    if m.token_dim <= 0 or m.token_dim % m.mapper_heads != 0:
        problems.append(
            f"model.token_dim ({m.token_dim}) must be positive and divisible by mapper_heads ({m.mapper_heads})"
        )
    if m.mapper_layers <= 0:
        problems.append(f"model.mapper_layers must be positive, got {m.mapper_layers}")
    if m.face_embed_dim <= 0:
        problems.append(f"model.face_embed_dim must be positive, got {m.face_embed_dim}")
    if m.vision_dim <= 0:
        problems.append(f"model.vision_dim must be positive, got {m.vision_dim}")
    if m.vision_grid <= 0 or m.vision_input % max(1, m.vision_grid) != 0:
        problems.append(
            f"model.vision_input ({m.vision_input}) must be divisible by vision_grid ({m.vision_grid})"
        )
    if m.timesteps <= 0:
        problems.append(f"model.timesteps must be positive, got {m.timesteps}")
    if not (0.0 < m.beta_start <= m.beta_end < 1.0):
        problems.append(
            f"model betas must satisfy 0 < beta_start <= beta_end < 1, got ({m.beta_start}, {m.beta_end})"
        )
    if t.steps < 0:
        # 0 is a legal degenerate run: it emits the initialization checkpoint
        problems.append(f"training.steps must be >= 0, got {t.steps}")
    if t.batch_size <= 0:
        problems.append(f"training.batch_size must be positive, got {t.batch_size}")
    if t.lr <= 0 or t.mask_lr <= 0:
        problems.append("training learning rates must be positive")
    if t.mask_steps < 0 or t.mask_pairs <= 0:
        problems.append("training.mask_steps must be >= 0 and mask_pairs positive")
    if t.checkpoint_every < 0:
        problems.append(f"training.checkpoint_every must be >= 0, got {t.checkpoint_every}")
    if not (0.0 <= t.drop_both <= 1.0 and 0.0 <= t.drop_attr <= 1.0 and t.drop_both + t.drop_attr <= 1.0):
        problems.append(
            f"condition-drop probabilities must be in [0, 1] and sum to <= 1, got ({t.drop_both}, {t.drop_attr})"
        )
    if not (0.0 <= t.reenact_prob <= 1.0):
        problems.append(f"training.reenact_prob must be in [0, 1], got {t.reenact_prob}")
    if s.steps <= 0:
        problems.append(f"sampling.steps must be positive, got {s.steps}")
    if s.guidance_scale <= 0:
        problems.append(f"sampling.guidance_scale must be positive, got {s.guidance_scale}")
    if c.identities <= 0 or c.frames <= 0:
        problems.append("corpus.identities and corpus.frames must be positive")
    if c.frames < 2:
        problems.append(f"corpus.frames must be >= 2 to form training pairs, got {c.frames}")
    if c.resolution <= 0 or c.resolution % 4 != 0:
        problems.append(f"corpus.resolution must be a positive multiple of 4, got {c.resolution}")
    if problems:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(problems))
