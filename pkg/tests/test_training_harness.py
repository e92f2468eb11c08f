"""Task stream, condition dropping, example assembly, and the training loop."""

import numpy as np
import pytest
import torch
from scipy import stats

from face_adapter import AdapterModules
from face_adapter.attribute import (
    attribute_to_tokens,
    compose_spatial_control,
    extract_attribute_embeddings,
)
from face_adapter.config import toy_run_config
from face_adapter.errors import ContractViolationError
from face_adapter.mappers import TokenKind
from face_adapter.masks import Task, build_gt_mask_reenact, build_gt_mask_swap, default_dilation_radius
from face_adapter.morphable import landmarks_for, recombine_coefficients, render_landmark_image
from face_adapter.training import (
    DropRecord,
    LossRow,
    build_training_example,
    draw_drop_record,
    drop_conditions,
    run_adapter_training,
    sample_task,
    training_step,
)


class _ForcedUniform:
    """Generator stand-in whose first uniform draw is fixed.

    Only the methods the harness consumes are implemented; everything beyond
    the forced .random() call is delegated to a real generator.
    """

    def __init__(self, u, seed=0):
        self.u = u
        self._gen = np.random.default_rng(seed)

    def random(self):
        return self.u

    def standard_normal(self, shape):
        return self._gen.standard_normal(shape)

    def integers(self, low, high=None):
        return self._gen.integers(low, high)


# ---------------------------------------------------------------------------
# task stream
# ---------------------------------------------------------------------------

def test_task_threshold_behavior():
    assert sample_task(_ForcedUniform(0.0)) is Task.REENACT
    assert sample_task(_ForcedUniform(0.49)) is Task.REENACT
    assert sample_task(_ForcedUniform(0.51)) is Task.SWAP
    assert sample_task(_ForcedUniform(0.99)) is Task.SWAP


def test_task_sequence_is_seed_deterministic():
    rng1, rng2 = np.random.default_rng(7), np.random.default_rng(7)
    seq1 = [sample_task(rng1) for _ in range(200)]
    seq2 = [sample_task(rng2) for _ in range(200)]
    assert seq1 == seq2
    assert Task.REENACT in seq1 and Task.SWAP in seq1


def test_task_frequency_over_100k_draws():
    rng = np.random.default_rng(123)
    n = 100_000
    reenact = sum(sample_task(rng) is Task.REENACT for _ in range(n))
    assert abs(reenact / n - 0.5) <= 0.01


def test_task_rejects_bad_probability():
    with pytest.raises(ContractViolationError):
        sample_task(np.random.default_rng(0), reenact_prob=1.5)


# ---------------------------------------------------------------------------
# condition dropping
# ---------------------------------------------------------------------------

def test_drop_record_forced_branches():
    assert draw_drop_record(_ForcedUniform(0.01)) is DropRecord.BOTH
    assert draw_drop_record(_ForcedUniform(0.049)) is DropRecord.BOTH
    assert draw_drop_record(_ForcedUniform(0.05)) is DropRecord.ATTR_ONLY
    assert draw_drop_record(_ForcedUniform(0.49)) is DropRecord.ATTR_ONLY
    assert draw_drop_record(_ForcedUniform(0.50)) is DropRecord.NONE
    assert draw_drop_record(_ForcedUniform(0.99)) is DropRecord.NONE


def test_drop_conditions_replace_the_right_tokens():
    modules = AdapterModules(toy_run_config().model)
    from face_adapter.identity import null_identity_tokens
    from face_adapter.attribute import null_attribute_tokens
    from face_adapter.mappers import TokenSequence

    gen = torch.Generator().manual_seed(0)
    shape = null_identity_tokens(modules.id_mapper).tokens.shape
    id_tokens = TokenSequence(tokens=torch.randn(shape, generator=gen), kind=TokenKind.IDENTITY)
    attr_tokens = TokenSequence(tokens=torch.randn(shape, generator=gen), kind=TokenKind.ATTRIBUTE)
    null_id = null_identity_tokens(modules.id_mapper)
    null_attr = null_attribute_tokens(modules.attr_mapper)

    i, a, rec = drop_conditions(id_tokens, attr_tokens, _ForcedUniform(0.01), null_id, null_attr)
    assert rec is DropRecord.BOTH and i is null_id and a is null_attr
    i, a, rec = drop_conditions(id_tokens, attr_tokens, _ForcedUniform(0.25), null_id, null_attr)
    assert rec is DropRecord.ATTR_ONLY and i is id_tokens and a is null_attr
    i, a, rec = drop_conditions(id_tokens, attr_tokens, _ForcedUniform(0.75), null_id, null_attr)
    assert rec is DropRecord.NONE and i is id_tokens and a is attr_tokens


def test_drop_frequencies_over_100k_draws():
    rng = np.random.default_rng(321)
    n = 100_000
    counts = {rec: 0 for rec in DropRecord}
    for _ in range(n):
        counts[draw_drop_record(rng)] += 1
    assert abs(counts[DropRecord.NONE] / n - 0.50) <= 0.01
    assert abs(counts[DropRecord.ATTR_ONLY] / n - 0.45) <= 0.01
    assert abs(counts[DropRecord.BOTH] / n - 0.05) <= 0.01
    chi = stats.chisquare(
        [counts[DropRecord.NONE], counts[DropRecord.ATTR_ONLY], counts[DropRecord.BOTH]],
        [0.50 * n, 0.45 * n, 0.05 * n],
    )
    assert chi.pvalue > 0.01


def test_drop_rejects_invalid_probabilities():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractViolationError):
        draw_drop_record(rng, p_both=0.6, p_attr=0.6)
    with pytest.raises(ContractViolationError):
        draw_drop_record(rng, p_both=-0.1)


# ---------------------------------------------------------------------------
# example assembly
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_modules(small_sampler):
    cfg = toy_run_config()
    return AdapterModules(cfg.model, morphable=small_sampler.morphable)


def _pair(sampler, seed=3):
    return sampler.sample_pair(np.random.default_rng(seed))


def test_reenact_spatial_keeps_source_outside_mask(small_sampler, toy_modules):
    pair = _pair(small_sampler)
    example = build_training_example(pair, Task.REENACT, toy_modules, _ForcedUniform(0.9, seed=1))
    res = pair.target_image.shape[0]
    radius = default_dilation_radius(res)
    mask = build_gt_mask_reenact(pair.source_head, pair.target_head, radius)
    recombined = recombine_coefficients(pair.source_coeffs, pair.target_coeffs)
    lmk_image = render_landmark_image(
        landmarks_for(recombined, toy_modules.morphable, (res, res)), toy_modules.render_style
    )
    outside = (mask.binarized() == 0) & ~(lmk_image > 0).any(axis=2)
    assert outside.any()
    assert np.array_equal(example.spatial.image[outside], pair.source_image[outside])
    # and the whole composition matches the task equation
    expected = compose_spatial_control(pair.source_image, mask, lmk_image)
    assert np.array_equal(example.spatial.image, expected.image)


def test_swap_spatial_and_template_come_from_target(small_sampler, toy_modules):
    pair = _pair(small_sampler, seed=4)
    example = build_training_example(pair, Task.SWAP, toy_modules, _ForcedUniform(0.9, seed=2))
    res = pair.target_image.shape[0]
    mask = build_gt_mask_swap(pair.target_face, default_dilation_radius(res))
    recombined = recombine_coefficients(pair.source_coeffs, pair.target_coeffs)
    lmk_image = render_landmark_image(
        landmarks_for(recombined, toy_modules.morphable, (res, res)), toy_modules.render_style
    )
    expected = compose_spatial_control(pair.target_image, mask, lmk_image)
    assert np.array_equal(example.spatial.image, expected.image)
    # attribute template is the target frame: tokens match encoding the target
    feats = extract_attribute_embeddings(toy_modules.vision_encoder, pair.target_image)
    expected_tokens = attribute_to_tokens(toy_modules.attr_mapper, feats)
    assert torch.allclose(example.attr_tokens.tokens, expected_tokens.tokens, atol=1e-6)


def test_both_tasks_denoise_the_target_frame(small_sampler, toy_modules):
    pair = _pair(small_sampler, seed=5)
    re = build_training_example(pair, Task.REENACT, toy_modules, _ForcedUniform(0.9, seed=3))
    sw = build_training_example(pair, Task.SWAP, toy_modules, _ForcedUniform(0.9, seed=3))
    assert torch.equal(re.x0, sw.x0)
    assert torch.equal(re.x0, toy_modules.codec.encode(pair.target_image))


def test_example_fields_are_consistent(small_sampler, toy_modules):
    pair = _pair(small_sampler, seed=6)
    for seed in range(30):
        rng = np.random.default_rng(seed)
        task = sample_task(rng)
        ex = build_training_example(pair, task, toy_modules, rng)
        assert ex.task is task
        assert ex.x0.shape == ex.eps.shape
        assert 0 <= ex.t < toy_modules.schedule.timesteps
        assert ex.spatial.task is task
        if ex.drop is DropRecord.BOTH:
            assert ex.id_tokens.kind is TokenKind.NULL
            assert ex.attr_tokens.kind is TokenKind.NULL
        elif ex.drop is DropRecord.ATTR_ONLY:
            assert ex.id_tokens.kind is TokenKind.IDENTITY
            assert ex.attr_tokens.kind is TokenKind.NULL
        else:
            assert ex.id_tokens.kind is TokenKind.IDENTITY
            assert ex.attr_tokens.kind is TokenKind.ATTRIBUTE


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

class _EpsOracleModules:
    """Minimal modules bundle whose backbone replays the batch's exact noise."""

    def __init__(self, schedule):
        self.schedule = schedule
        self.dummy = torch.nn.Parameter(torch.zeros(1))
        self.eps = None

    def control_branch(self, x_t, t, context, spatial):
        return None

    def backbone(self, x_t, t, context, residuals):
        return self.eps + self.dummy * 0.0


def test_exact_noise_prediction_gives_zero_loss(small_sampler, toy_modules):
    pair = _pair(small_sampler, seed=7)
    examples = [
        build_training_example(pair, Task.REENACT, toy_modules, np.random.default_rng(k))
        for k in range(3)
    ]
    oracle = _EpsOracleModules(toy_modules.schedule)
    oracle.eps = torch.stack([ex.eps for ex in examples])
    optimizer = torch.optim.SGD([oracle.dummy], lr=0.1)
    loss = training_step(examples, oracle, optimizer)
    assert loss == 0.0


def test_training_step_rejects_empty_batch(toy_modules):
    optimizer = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=0.1)
    with pytest.raises(ContractViolationError):
        training_step([], toy_modules, optimizer)


def test_backbone_is_bit_identical_after_steps(small_sampler):
    cfg = toy_run_config()
    modules = AdapterModules(cfg.model, morphable=small_sampler.morphable)
    before = modules.backbone_fingerprint()
    modules.set_train(True)
    optimizer = torch.optim.AdamW(modules.adapter_parameters(), lr=1e-3)
    pair = _pair(small_sampler, seed=8)
    for step in range(10):
        rng = np.random.default_rng([9, step])
        task = sample_task(rng)
        training_step([build_training_example(pair, task, modules, rng)], modules, optimizer)
    assert modules.backbone_fingerprint() == before


def test_single_example_overfit_descends(small_sampler):
    """200 repeated steps on one example: late losses beat early losses."""
    cfg = toy_run_config()
    modules = AdapterModules(cfg.model, morphable=small_sampler.morphable)
    modules.set_train(True)
    optimizer = torch.optim.AdamW(modules.adapter_parameters(), lr=1e-3)
    pair = small_sampler.pair_from_indices(small_sampler.labels[0], 0, 1)
    losses = []
    for _ in range(200):
        # Rebuilt each step: the example's condition tokens live in the autograd
        # graph while the encoders train, so a cached one cannot be reused.
        example = build_training_example(pair, Task.REENACT, modules, np.random.default_rng(10))
        losses.append(training_step([example], modules, optimizer))
    assert all(np.isfinite(losses))
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


# ---------------------------------------------------------------------------
# pair sampling
# ---------------------------------------------------------------------------

def test_single_identity_two_frames_gives_both_orders(overfit_corpus):
    from face_adapter import ingest_dataset

    sampler = ingest_dataset(overfit_corpus / "manifest.json", resolution=64)
    seen = set()
    rng = np.random.default_rng(11)
    for _ in range(64):
        pair = sampler.sample_pair(rng)
        assert not np.array_equal(pair.source_image, pair.target_image)
        src = 0 if np.array_equal(pair.source_image, sampler.frame(pair.identity, 0).image) else 1
        seen.add((src, 1 - src))
    assert seen == {(0, 1), (1, 0)}


def test_identity_draw_frequency(small_sampler):
    rng = np.random.default_rng(12)
    n = 10_000
    counts = {}
    for _ in range(n):
        pair = small_sampler.sample_pair(rng)
        counts[pair.identity] = counts.get(pair.identity, 0) + 1
    assert len(counts) == 2
    for label, c in counts.items():
        assert abs(c / n - 0.5) <= 0.02, label


def test_source_and_target_frames_always_differ(small_sampler):
    rng = np.random.default_rng(13)
    for _ in range(500):
        pair = small_sampler.sample_pair(rng)
        assert not np.array_equal(pair.source_image, pair.target_image)


# ---------------------------------------------------------------------------
# the loop: checkpoints and resume
# ---------------------------------------------------------------------------

def _flat_state(modules):
    return {
        f"{name}.{key}": tensor.clone()
        for name, state in modules.state_payload().items()
        for key, tensor in state.items()
    }


def test_construction_is_pure_in_the_config_seed(small_sampler):
    """Same config gives bitwise-identical modules despite global RNG churn.

    Checkpoints store only adapter weights and rebuild the frozen backbone
    from the config seed, so construction must not read torch's global RNG
    (which default layer init does for biases).
    """
    cfg = toy_run_config()
    one = AdapterModules(cfg.model, morphable=small_sampler.morphable)
    torch.manual_seed(987654)
    torch.randn(1000)
    two = AdapterModules(cfg.model, morphable=small_sampler.morphable)
    first, second = _flat_state(one), _flat_state(two)
    assert first.keys() == second.keys()
    for key in first:
        assert torch.equal(first[key], second[key]), key
    for key, tensor in one.backbone.state_dict().items():
        assert torch.equal(tensor, two.backbone.state_dict()[key]), key
    assert one.backbone_fingerprint() == two.backbone_fingerprint()


def test_resumed_run_matches_straight_run(small_sampler, tmp_path):
    from face_adapter.adapter import load_checkpoint

    cfg = toy_run_config()
    cfg.training.steps = 12
    cfg.training.batch_size = 2
    cfg.training.mask_steps = 0
    cfg.training.checkpoint_every = 6

    straight = AdapterModules(cfg.model, morphable=small_sampler.morphable)
    run_adapter_training(straight, small_sampler, cfg.training, tmp_path / "straight")

    fresh = AdapterModules(cfg.model, morphable=small_sampler.morphable)
    run_adapter_training(fresh, small_sampler, cfg.training, tmp_path / "partial")
    resumed, info = load_checkpoint(tmp_path / "partial" / "checkpoint_step_000006.pt")
    assert info["step"] == 6
    run_adapter_training(
        resumed,
        small_sampler,
        cfg.training,
        tmp_path / "resumed",
        start_step=info["step"],
        optimizer_state=info["optimizer_state"],
    )

    a = _flat_state(straight)
    b = _flat_state(resumed)
    assert a.keys() == b.keys()
    for key in a:
        assert torch.equal(a[key], b[key]), key


def test_loss_trace_has_one_row_per_step(small_sampler, tmp_path):
    cfg = toy_run_config()
    cfg.training.steps = 4
    cfg.training.batch_size = 2
    cfg.training.mask_steps = 0
    cfg.training.checkpoint_every = 0
    modules = AdapterModules(cfg.model, morphable=small_sampler.morphable)
    result = run_adapter_training(modules, small_sampler, cfg.training, tmp_path / "run")
    assert [row.step for row in result.loss_rows] == [0, 1, 2, 3]
    assert all(np.isfinite(row.loss) for row in result.loss_rows)
    assert (tmp_path / "run" / "loss.csv").exists()
    assert (tmp_path / "run" / "checkpoint_final.pt").exists()


def test_run_rejects_bad_start_step(small_sampler, tmp_path):
    cfg = toy_run_config()
    cfg.training.steps = 4
    modules = AdapterModules(cfg.model, morphable=small_sampler.morphable)
    with pytest.raises(ContractViolationError):
        run_adapter_training(modules, small_sampler, cfg.training, tmp_path / "x", start_step=9)
