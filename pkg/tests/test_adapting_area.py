"""Ground-truth mask construction and the adapting-area predictor."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from face_adapter.errors import ConfigurationError, ContractViolationError
from face_adapter.masks import (
    AdaptingMask,
    SegmentationHead,
    Task,
    build_gt_mask_reenact,
    build_gt_mask_swap,
    default_dilation_radius,
    dilate_mask,
    predict_adapting_area,
    train_area_predictor,
)


def _chebyshev_dilate_oracle(mask: np.ndarray, radius: int) -> np.ndarray:
    """Naive per-pixel scan: lit iff any set pixel within Chebyshev distance r."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    src = mask.astype(bool)
    for y in range(h):
        for x in range(w):
            y0, y1 = max(0, y - radius), min(h, y + radius + 1)
            x0, x1 = max(0, x - radius), min(w, x + radius + 1)
            out[y, x] = src[y0:y1, x0:x1].any()
    return out


# ---------------------------------------------------------------------------
# ground-truth masks
# ---------------------------------------------------------------------------

def test_reenact_gt_of_empty_masks_is_empty():
    empty = np.zeros((8, 8), dtype=np.float32)
    out = build_gt_mask_reenact(empty, empty, radius=2)
    assert out.task is Task.REENACT
    assert not out.values.any()


def test_reenact_gt_union_without_dilation():
    a = np.zeros((8, 8), dtype=np.float32)
    b = np.zeros((8, 8), dtype=np.float32)
    a[1, 1] = 1.0
    b[5, 5] = 1.0
    out = build_gt_mask_reenact(a, b, radius=0)
    lit = np.argwhere(out.values > 0)
    assert {tuple(p) for p in lit} == {(1, 1), (5, 5)}


def test_reenact_gt_matches_naive_morphology_scan():
    rng = np.random.default_rng(42)
    for _ in range(20):
        a = (rng.random((16, 16)) < 0.1).astype(np.float32)
        b = (rng.random((16, 16)) < 0.1).astype(np.float32)
        got = build_gt_mask_reenact(a, b, radius=2).values.astype(bool)
        want = _chebyshev_dilate_oracle(np.logical_or(a, b), 2)
        assert np.array_equal(got, want)


def test_reenact_gt_is_symmetric_in_its_masks():
    rng = np.random.default_rng(43)
    a = (rng.random((12, 12)) < 0.15).astype(np.float32)
    b = (rng.random((12, 12)) < 0.15).astype(np.float32)
    ab = build_gt_mask_reenact(a, b, radius=1).values
    ba = build_gt_mask_reenact(b, a, radius=1).values
    assert np.array_equal(ab, ba)


def test_reenact_gt_covers_both_head_masks():
    rng = np.random.default_rng(44)
    a = (rng.random((16, 16)) < 0.2).astype(np.float32)
    b = (rng.random((16, 16)) < 0.2).astype(np.float32)
    out = build_gt_mask_reenact(a, b, radius=3).values
    assert np.all(out[a > 0] == 1.0)
    assert np.all(out[b > 0] == 1.0)


def test_reenact_gt_rejects_shape_mismatch():
    with pytest.raises(ContractViolationError):
        build_gt_mask_reenact(np.zeros((8, 8)), np.zeros((8, 9)), radius=1)


def test_swap_gt_empty_and_full():
    empty = np.zeros((10, 10), dtype=np.float32)
    assert not build_gt_mask_swap(empty, radius=4).values.any()
    full = np.ones((10, 10), dtype=np.float32)
    out = build_gt_mask_swap(full, radius=7)
    assert out.task is Task.SWAP
    assert out.values.all()


def test_swap_gt_matches_naive_morphology_scan():
    rng = np.random.default_rng(45)
    for _ in range(20):
        f = (rng.random((16, 16)) < 0.08).astype(np.float32)
        got = build_gt_mask_swap(f, radius=3).values.astype(bool)
        assert np.array_equal(got, _chebyshev_dilate_oracle(f, 3))


# ---------------------------------------------------------------------------
# dilation properties
# ---------------------------------------------------------------------------

_mask_strategy = arrays(
    dtype=bool, shape=(12, 12), elements=st.booleans()
)


@settings(max_examples=40, deadline=None)
@given(_mask_strategy, st.integers(min_value=0, max_value=4))
def test_dilation_is_extensive(mask, radius):
    out = dilate_mask(mask.astype(np.float32), radius).astype(bool)
    assert np.all(out[mask])


@settings(max_examples=40, deadline=None)
@given(_mask_strategy, _mask_strategy, st.integers(min_value=0, max_value=4))
def test_dilation_is_monotone(a, b, radius):
    small = np.logical_and(a, b)
    big = np.logical_or(a, b)
    da = dilate_mask(small.astype(np.float32), radius).astype(bool)
    db = dilate_mask(big.astype(np.float32), radius).astype(bool)
    assert np.all(db[da])


@settings(max_examples=30, deadline=None)
@given(_mask_strategy)
def test_dilation_radius_zero_is_identity(mask):
    out = dilate_mask(mask.astype(np.float32), 0)
    assert np.array_equal(out.astype(bool), mask)


def test_dilation_rejects_non_binary_input():
    with pytest.raises(ContractViolationError):
        dilate_mask(np.full((4, 4), 0.5, dtype=np.float32), 1)


def test_default_dilation_radius_is_three_percent_of_side():
    assert default_dilation_radius(512) == 15
    assert default_dilation_radius(64) == 2
    assert default_dilation_radius(16) == 1  # floor


# ---------------------------------------------------------------------------
# the mask type
# ---------------------------------------------------------------------------

def test_adapting_mask_rejects_out_of_range_values():
    with pytest.raises(ContractViolationError):
        AdaptingMask(values=np.full((4, 4), 1.5, dtype=np.float32), task=Task.SWAP)


def test_adapting_mask_binarizes_at_half():
    vals = np.array([[0.0, 0.49], [0.5, 1.0]], dtype=np.float32)
    m = AdaptingMask(values=vals, task=Task.REENACT)
    assert np.array_equal(m.binarized(), [[0.0, 0.0], [1.0, 1.0]])


# ---------------------------------------------------------------------------
# predictor
# ---------------------------------------------------------------------------

def _toy_triple(rng, size=32, task=Task.REENACT):
    image = rng.random((size, size, 3)).astype(np.float32)
    lmk = np.zeros((size, size, 3), dtype=np.float32)
    lmk[size // 2, size // 2] = 1.0
    gt = np.zeros((size, size), dtype=np.float32)
    gt[size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = 1.0
    mask = AdaptingMask(values=gt, task=task)
    return image, lmk, mask


def test_untrained_head_predicts_exactly_half_everywhere(rng):
    head = SegmentationHead(Task.REENACT, seed=3)
    image, lmk, _ = _toy_triple(rng)
    out = predict_adapting_area(head, image, lmk)
    assert np.array_equal(out.values, np.full((32, 32), 0.5, dtype=np.float32))


def test_predictor_is_deterministic_in_eval_mode(rng):
    head = SegmentationHead(Task.SWAP, seed=4)
    image, lmk, _ = _toy_triple(rng, task=Task.SWAP)
    a = predict_adapting_area(head, image, lmk)
    b = predict_adapting_area(head, image, lmk)
    assert np.array_equal(a.values, b.values)
    assert a.task is Task.SWAP


def test_predictor_overfits_one_triple_to_high_iou(rng):
    head = SegmentationHead(Task.REENACT, seed=5)
    triple = _toy_triple(rng)
    train_area_predictor(head, [triple], steps=500, lr=1e-3, seed=0)
    pred = predict_adapting_area(head, triple[0], triple[1]).binarized().astype(bool)
    gt = triple[2].values.astype(bool)
    iou = np.logical_and(pred, gt).sum() / np.logical_or(pred, gt).sum()
    assert iou >= 0.95


def test_trainer_with_zero_steps_changes_nothing(rng):
    head = SegmentationHead(Task.REENACT, seed=6)
    before = [p.detach().clone() for p in head.parameters()]
    trace = train_area_predictor(head, [_toy_triple(rng)], steps=0)
    assert trace == []
    for p, q in zip(head.parameters(), before):
        assert torch.equal(p, q)


def test_trainer_drives_empty_target_probabilities_down(rng):
    head = SegmentationHead(Task.SWAP, seed=7)
    image, lmk, _ = _toy_triple(rng, task=Task.SWAP)
    empty = AdaptingMask(values=np.zeros((32, 32), dtype=np.float32), task=Task.SWAP)
    train_area_predictor(head, [(image, lmk, empty)], steps=300, lr=1e-3, seed=0)
    out = predict_adapting_area(head, image, lmk)
    assert float(out.values.mean()) < 0.1


def test_trainer_loss_descends_on_a_toy_set(rng):
    head = SegmentationHead(Task.REENACT, seed=8)
    dataset = []
    for k in range(20):
        image = rng.random((32, 32, 3)).astype(np.float32)
        lmk = np.zeros((32, 32, 3), dtype=np.float32)
        lmk[(3 * k) % 32, (5 * k) % 32] = 1.0
        gt = np.zeros((32, 32), dtype=np.float32)
        gt[: 8 + k % 8, :] = 1.0
        dataset.append((image, lmk, AdaptingMask(values=gt, task=Task.REENACT)))
    trace = train_area_predictor(head, dataset, steps=200, lr=1e-3, seed=1)
    tenth = len(trace) // 10
    assert np.mean(trace[-tenth:]) < np.mean(trace[:tenth])


def test_trainer_rejects_empty_dataset():
    head = SegmentationHead(Task.REENACT, seed=9)
    with pytest.raises(ConfigurationError):
        train_area_predictor(head, [], steps=10)


def test_trainer_rejects_task_mismatch(rng):
    head = SegmentationHead(Task.REENACT, seed=10)
    image, lmk, _ = _toy_triple(rng)
    wrong = AdaptingMask(values=np.zeros((32, 32), dtype=np.float32), task=Task.SWAP)
    with pytest.raises(ContractViolationError):
        train_area_predictor(head, [(image, lmk, wrong)], steps=5)


def test_untrained_loss_is_ln_two(rng):
    # zero logits against any binary target give BCE of exactly ln(2)
    head = SegmentationHead(Task.REENACT, seed=11)
    trace = train_area_predictor(head, [_toy_triple(rng)], steps=1, lr=0.0)
    assert abs(trace[0] - float(np.log(2.0))) < 1e-6
