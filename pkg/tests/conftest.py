"""Shared fixtures.

The expensive session fixtures (synthetic corpora, the overfit training run)
are built once and reused across files; each records how long its build took
so the acceptance tests can assert runtime budgets that include setup.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from face_adapter import (
    AdapterModules,
    PairSampler,
    generate_corpus,
    ingest_dataset,
    train_mask_predictors,
)
from face_adapter.config import RunConfig, SamplingConfig, toy_run_config
from face_adapter.training import run_adapter_training


# Training recipe for the overfit round-trip checks. Chosen by measurement
# on this corpus; see the assertions in the acceptance test for the budgets
# they must fit inside.
OVERFIT_STEPS = 3000
OVERFIT_LR = 3e-3
OVERFIT_BATCH = 8
# Deterministic sampler settings every round-trip check shares. Guidance 1
# skips the negative branch, which both halves the sampling cost and scores
# the conditional model on its own (the toy corpus has nothing to steer away
# from).
OVERFIT_SAMPLING = SamplingConfig(steps=20, guidance_scale=1.0, seed=99)


@dataclass
class TrainedSetup:
    """A trained toy model plus everything needed to judge it."""

    config: RunConfig
    sampler: PairSampler
    modules: AdapterModules
    run_dir: Path
    train_seconds: float


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("corpus_small")
    generate_corpus(root, identities=2, frames=3, resolution=64, seed=11)
    return root


@pytest.fixture(scope="session")
def small_sampler(small_corpus) -> PairSampler:
    return ingest_dataset(small_corpus / "manifest.json", resolution=64)


@pytest.fixture(scope="session")
def overfit_corpus(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("corpus_overfit")
    generate_corpus(root, identities=1, frames=2, resolution=64, seed=5)
    return root


@pytest.fixture(scope="session")
def overfit_setup(overfit_corpus, tmp_path_factory) -> TrainedSetup:
    """One full toy training run on the 1-identity, 2-frame corpus."""
    cfg = toy_run_config()
    cfg.training.steps = OVERFIT_STEPS
    cfg.training.lr = OVERFIT_LR
    cfg.training.batch_size = OVERFIT_BATCH
    cfg.training.mask_steps = 200
    cfg.training.mask_pairs = 8
    cfg.training.checkpoint_every = 0
    sampler = ingest_dataset(overfit_corpus / "manifest.json", resolution=64)
    modules = AdapterModules(cfg.model, morphable=sampler.morphable)
    run_dir = tmp_path_factory.mktemp("overfit_run")
    started = time.monotonic()
    train_mask_predictors(modules, sampler, cfg.training)
    run_adapter_training(modules, sampler, cfg.training, run_dir)
    elapsed = time.monotonic() - started
    modules.set_train(False)
    return TrainedSetup(
        config=cfg,
        sampler=sampler,
        modules=modules,
        run_dir=run_dir,
        train_seconds=elapsed,
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
