"""Metric oracles, retrieval, and the run-level report machinery."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from face_adapter.errors import FormatError, MetricError
from face_adapter.identity import ToyFaceRecognizer, extract_face_embedding
from face_adapter.imaging import load_image, save_image
from face_adapter.metrics import (
    EvalRow,
    csim,
    evaluate_run,
    id_retrieval,
    load_eval_manifest,
    motion_errors,
    psnr,
    register_feature_metric,
    write_report_csv,
)
from face_adapter.morphable import FaceCoefficients, save_coefficients


def _coeffs(rng, d_id=4, d_exp=3, d_gaze=2):
    return FaceCoefficients(
        identity=rng.normal(size=d_id),
        expression=rng.normal(size=d_exp),
        rotation=rng.normal(size=3),
        translation=rng.normal(size=3),
        gaze=rng.normal(size=d_gaze),
    )


# ---------------------------------------------------------------------------
# cosine similarity
# ---------------------------------------------------------------------------

def test_csim_identical_is_one():
    v = np.array([0.3, -1.2, 0.5])
    assert csim(v, v) == pytest.approx(1.0, abs=1e-12)


def test_csim_orthogonal_is_zero():
    assert csim(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(0.0, abs=1e-12)


def test_csim_matches_scalar_oracle():
    """Normalize, then plain sum(a_i * b_i), 100 random pairs."""
    rng = np.random.default_rng(40)
    for _ in range(100):
        a = rng.normal(size=16)
        b = rng.normal(size=16)
        ua = a / math.sqrt(sum(x * x for x in a))
        ub = b / math.sqrt(sum(x * x for x in b))
        expected = sum(x * y for x, y in zip(ua, ub))
        assert abs(csim(a, b) - expected) < 1e-9


def test_csim_is_symmetric():
    rng = np.random.default_rng(41)
    a, b = rng.normal(size=8), rng.normal(size=8)
    assert csim(a, b) == pytest.approx(csim(b, a), abs=1e-12)


def test_csim_rejects_zero_norm():
    with pytest.raises(MetricError):
        csim(np.zeros(4), np.ones(4))


def test_csim_rejects_dim_mismatch():
    with pytest.raises(MetricError):
        csim(np.ones(4), np.ones(5))


def test_csim_rejects_non_finite():
    with pytest.raises(MetricError):
        csim(np.array([1.0, np.nan]), np.ones(2))


# ---------------------------------------------------------------------------
# motion errors
# ---------------------------------------------------------------------------

def test_motion_errors_zero_for_equal_coefficients():
    c = _coeffs(np.random.default_rng(42))
    me = motion_errors(c, c)
    assert (me.pose, me.expression, me.gaze) == (0.0, 0.0, 0.0)


def test_motion_errors_unit_expression_offset():
    rng = np.random.default_rng(43)
    ref = _coeffs(rng)
    bumped = FaceCoefficients(
        identity=ref.identity,
        expression=ref.expression + np.array([0.0, 1.0, 0.0]),
        rotation=ref.rotation,
        translation=ref.translation,
        gaze=ref.gaze,
    )
    me = motion_errors(bumped, ref)
    assert me.expression == pytest.approx(1.0, abs=1e-12)
    assert me.pose == 0.0
    assert me.gaze == 0.0


def test_motion_errors_match_naive_loop():
    """50 random pairs against per-component sqrt-of-squares sums."""
    rng = np.random.default_rng(44)
    for _ in range(50):
        g, r = _coeffs(rng), _coeffs(rng)
        me = motion_errors(g, r)
        pose_sq = sum(
            (x - y) ** 2
            for x, y in zip(
                list(g.rotation) + list(g.translation),
                list(r.rotation) + list(r.translation),
            )
        )
        exp_sq = sum((x - y) ** 2 for x, y in zip(g.expression, r.expression))
        gaze_sq = sum((x - y) ** 2 for x, y in zip(g.gaze, r.gaze))
        assert abs(me.pose - math.sqrt(pose_sq)) < 1e-9
        assert abs(me.expression - math.sqrt(exp_sq)) < 1e-9
        assert abs(me.gaze - math.sqrt(gaze_sq)) < 1e-9


def test_motion_errors_reject_dim_mismatch():
    rng = np.random.default_rng(45)
    with pytest.raises(MetricError):
        motion_errors(_coeffs(rng, d_exp=3), _coeffs(rng, d_exp=5))
    with pytest.raises(MetricError):
        motion_errors(_coeffs(rng, d_gaze=2), _coeffs(rng, d_gaze=4))


# ---------------------------------------------------------------------------
# psnr
# ---------------------------------------------------------------------------

def test_psnr_identical_images_return_inf_sentinel():
    img = np.random.default_rng(46).random((8, 8, 3))
    assert psnr(img, img.copy()) is math.inf


def test_psnr_zero_vs_peak_is_zero_db():
    a = np.zeros((4, 4), dtype=np.float64)
    b = np.full((4, 4), 255.0)
    assert psnr(a, b, peak=255.0) == pytest.approx(0.0, abs=1e-12)


def test_psnr_matches_scalar_oracle():
    rng = np.random.default_rng(47)
    for _ in range(100):
        a = rng.random((5, 7))
        b = rng.random((5, 7))
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert abs(psnr(a, b) - 10.0 * math.log10(1.0 / mse)) < 1e-9


def test_psnr_rejects_shape_mismatch():
    with pytest.raises(MetricError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_rejects_bad_peak():
    with pytest.raises(MetricError):
        psnr(np.zeros((2, 2)), np.ones((2, 2)), peak=0.0)


# ---------------------------------------------------------------------------
# identity retrieval
# ---------------------------------------------------------------------------

def _unit_rows(rng, n, d=12):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def test_retrieval_perfect_when_gallery_is_the_sources():
    rng = np.random.default_rng(48)
    embs = _unit_rows(rng, 5)
    pairs = [(f"id{i}", embs[i]) for i in range(5)]
    assert id_retrieval(pairs, pairs) == 1.0


def test_retrieval_zero_when_queries_match_distractors():
    rng = np.random.default_rng(49)
    gallery_embs = _unit_rows(rng, 3)
    distractors = _unit_rows(rng, 3)
    gallery = [(f"id{i}", gallery_embs[i]) for i in range(3)]
    queries = [(f"id{i}", distractors[i]) for i in range(3)]
    assert id_retrieval(queries, gallery, list(distractors)) == 0.0


def test_retrieval_matches_brute_force_scan():
    """20-item gallery, 30 queries, 5 distractors, exhaustive oracle."""
    rng = np.random.default_rng(50)
    gallery = [(f"g{i}", v) for i, v in enumerate(_unit_rows(rng, 20))]
    distractors = list(_unit_rows(rng, 5))
    queries = []
    for k in range(30):
        base = gallery[k % 20][1]
        noisy = base + 0.6 * rng.normal(size=base.shape)
        queries.append((f"g{k % 20}", noisy / np.linalg.norm(noisy)))

    rate = id_retrieval(queries, gallery, distractors)

    everything = [(label, v) for label, v in gallery]
    everything += [(None, v) for v in distractors]
    hits = 0
    for label, q in queries:
        best_label, best_sim = None, -2.0
        for cand_label, cand in everything:
            sim = float(np.dot(q, cand))
            if sim > best_sim:
                best_label, best_sim = cand_label, sim
        hits += best_label == label
    assert rate == pytest.approx(hits / len(queries), abs=1e-12)


def test_retrieval_rejects_empty_gallery():
    q = [("a", np.array([1.0, 0.0]))]
    with pytest.raises(MetricError):
        id_retrieval(q, [])
    with pytest.raises(MetricError):
        id_retrieval([], [("a", np.array([1.0, 0.0]))])


# ---------------------------------------------------------------------------
# run-level evaluation
# ---------------------------------------------------------------------------

def _write_manifest(path, entries, distractors=None):
    payload = {"format": "face-adapter-eval", "version": 1, "entries": entries}
    if distractors:
        payload["distractors"] = distractors
    path.write_text(json.dumps(payload), encoding="utf-8")


def _random_image(rng, size=16):
    return rng.random((size, size, 3))


def test_self_evaluation_is_perfect(tmp_path):
    """gen == ref for every row: CSIM 1, zero motion, PSNR sentinel."""
    rng = np.random.default_rng(51)
    entries = []
    for i in range(3):
        img = _random_image(rng)
        save_image(tmp_path / f"img{i}.png", img)
        coeffs = _coeffs(rng)
        save_coefficients(tmp_path / f"c{i}.txt", coeffs)
        entries.append(
            {
                "name": f"row{i}",
                "generated": f"img{i}.png",
                "reference": f"img{i}.png",
                "generated_coefficients": f"c{i}.txt",
                "reference_coefficients": f"c{i}.txt",
            }
        )
    _write_manifest(tmp_path / "eval.json", entries)

    report = evaluate_run(load_eval_manifest(tmp_path / "eval.json"), ToyFaceRecognizer(seed=7))
    assert [r.status for r in report.rows] == ["ok"] * 3
    for row in report.rows:
        assert row.csim == pytest.approx(1.0, abs=1e-9)
        assert (row.pose_err, row.exp_err, row.gaze_err) == (0.0, 0.0, 0.0)
        assert row.psnr is math.inf
    assert report.mean("psnr") is math.inf
    assert not report.warnings


def test_empty_manifest_is_a_format_error(tmp_path):
    _write_manifest(tmp_path / "eval.json", [])
    with pytest.raises(FormatError):
        load_eval_manifest(tmp_path / "eval.json")


def test_manifest_rejects_wrong_tag_and_version(tmp_path):
    p = tmp_path / "eval.json"
    p.write_text(json.dumps({"format": "nope", "version": 1, "entries": [{}]}))
    with pytest.raises(FormatError):
        load_eval_manifest(p)
    p.write_text(json.dumps({"format": "face-adapter-eval", "version": 99, "entries": [{}]}))
    with pytest.raises(FormatError):
        load_eval_manifest(p)
    p.write_text("{not json")
    with pytest.raises(FormatError):
        load_eval_manifest(p)


@pytest.fixture()
def ten_sample_run(tmp_path):
    """Ten rows of random images/coefficients plus retrieval labels."""
    rng = np.random.default_rng(52)
    for k in range(3):
        save_image(tmp_path / f"src{k}.png", _random_image(rng))
    entries = []
    for i in range(10):
        gen = _random_image(rng)
        ref = np.clip(gen + 0.1 * rng.normal(size=gen.shape), 0.0, 1.0)
        save_image(tmp_path / f"gen{i}.png", gen)
        save_image(tmp_path / f"ref{i}.png", ref)
        save_coefficients(tmp_path / f"gc{i}.txt", _coeffs(rng))
        save_coefficients(tmp_path / f"rc{i}.txt", _coeffs(rng))
        entries.append(
            {
                "name": f"s{i}",
                "generated": f"gen{i}.png",
                "reference": f"ref{i}.png",
                "generated_coefficients": f"gc{i}.txt",
                "reference_coefficients": f"rc{i}.txt",
                "source_label": f"person{i % 3}",
                "source_image": f"src{i % 3}.png",
            }
        )
    _write_manifest(tmp_path / "eval.json", entries)
    return tmp_path


def test_ten_sample_aggregates_match_hand_recomputation(ten_sample_run):
    recognizer = ToyFaceRecognizer(seed=7)
    manifest = load_eval_manifest(ten_sample_run / "eval.json")
    report = evaluate_run(manifest, recognizer)
    assert len(report.rows) == 10
    assert all(r.status == "ok" for r in report.rows)

    from face_adapter.morphable import load_coefficients

    by_hand = {"csim": [], "pose": [], "exp": [], "gaze": [], "psnr": []}
    for i, row in enumerate(report.rows):
        gen = load_image(ten_sample_run / f"gen{i}.png")
        ref = load_image(ten_sample_run / f"ref{i}.png")
        src = load_image(ten_sample_run / f"src{i % 3}.png")
        e_gen = extract_face_embedding(recognizer, gen).vector
        # identity similarity is scored against the source face when one is
        # listed, falling back to the reference otherwise
        e_src = extract_face_embedding(recognizer, src).vector
        assert row.csim == pytest.approx(csim(e_gen, e_src), abs=1e-9)
        me = motion_errors(
            load_coefficients(ten_sample_run / f"gc{i}.txt"),
            load_coefficients(ten_sample_run / f"rc{i}.txt"),
        )
        assert row.pose_err == pytest.approx(me.pose, abs=1e-9)
        assert row.psnr == pytest.approx(psnr(gen, ref), abs=1e-9)
        by_hand["csim"].append(row.csim)
        by_hand["pose"].append(row.pose_err)
        by_hand["exp"].append(row.exp_err)
        by_hand["gaze"].append(row.gaze_err)
        by_hand["psnr"].append(row.psnr)

    assert report.mean("csim") == pytest.approx(np.mean(by_hand["csim"]), abs=1e-9)
    assert report.mean("pose_err") == pytest.approx(np.mean(by_hand["pose"]), abs=1e-9)
    assert report.mean("exp_err") == pytest.approx(np.mean(by_hand["exp"]), abs=1e-9)
    assert report.mean("gaze_err") == pytest.approx(np.mean(by_hand["gaze"]), abs=1e-9)
    assert report.mean("psnr") == pytest.approx(np.mean(by_hand["psnr"]), abs=1e-9)


def test_report_invariant_to_entry_order(ten_sample_run):
    recognizer = ToyFaceRecognizer(seed=7)
    manifest = load_eval_manifest(ten_sample_run / "eval.json")
    forward = evaluate_run(manifest, recognizer)
    manifest.entries.reverse()
    backward = evaluate_run(manifest, recognizer)
    assert forward.mean("csim") == pytest.approx(backward.mean("csim"), abs=1e-12)
    assert forward.mean("psnr") == pytest.approx(backward.mean("psnr"), abs=1e-12)
    assert forward.retrieval == backward.retrieval
    fwd = {r.name: r.psnr for r in forward.rows}
    bwd = {r.name: r.psnr for r in backward.rows}
    assert fwd == bwd


def test_missing_generated_image_downgrades_row_and_continues(tmp_path):
    rng = np.random.default_rng(53)
    save_image(tmp_path / "ok.png", _random_image(rng))
    entries = [
        {"name": "gone", "generated": "missing.png", "reference": "ok.png"},
        {"name": "fine", "generated": "ok.png", "reference": "ok.png"},
    ]
    _write_manifest(tmp_path / "eval.json", entries)
    report = evaluate_run(load_eval_manifest(tmp_path / "eval.json"), ToyFaceRecognizer(seed=7))
    assert report.rows[0].status.startswith("missing:")
    assert report.rows[1].status == "ok"
    assert report.rows[1].psnr is math.inf
    assert len(report.warnings) == 1


def test_feature_metric_slots_default_to_unavailable(ten_sample_run):
    report = evaluate_run(load_eval_manifest(ten_sample_run / "eval.json"), ToyFaceRecognizer(seed=7))
    assert report.feature_values == {"fid": "unavailable", "lpips": "unavailable"}


def test_registered_feature_metric_is_invoked(ten_sample_run):
    calls = {}

    def fake_fid(gen_paths, ref_paths):
        calls["n"] = (len(gen_paths), len(ref_paths))
        return 12.5

    register_feature_metric("fid", fake_fid)
    try:
        report = evaluate_run(
            load_eval_manifest(ten_sample_run / "eval.json"), ToyFaceRecognizer(seed=7)
        )
    finally:
        register_feature_metric("fid", None)
    assert report.feature_values["fid"] == 12.5
    assert calls["n"] == (10, 10)
    assert report.feature_values["lpips"] == "unavailable"


def test_retrieval_counts_reflect_gallery_and_distractors(ten_sample_run):
    report = evaluate_run(load_eval_manifest(ten_sample_run / "eval.json"), ToyFaceRecognizer(seed=7))
    assert report.retrieval is not None
    assert report.retrieval_counts == (10, 3)


def test_report_csv_layout(tmp_path, ten_sample_run):
    import csv as csv_mod

    report = evaluate_run(load_eval_manifest(ten_sample_run / "eval.json"), ToyFaceRecognizer(seed=7))
    out = tmp_path / "report.csv"
    write_report_csv(out, report)
    with open(out, newline="") as fh:
        rows = list(csv_mod.reader(fh))
    assert rows[0] == list(
        ("name", "status", "csim", "pose_err", "exp_err", "gaze_err", "psnr", "id_retrieval", "fid", "lpips")
    )
    assert len(rows) == 12  # header + 10 entries + mean row
    assert rows[-1][0] == "mean"
    assert rows[-1][1] == "ok:10/10"
    # float cells round-trip exactly because they are written with repr
    assert float(rows[1][6]) == report.rows[0].psnr
    assert float(rows[-1][2]) == report.mean("csim")
    assert rows[-1][8] == "unavailable"


def test_mean_handles_all_none_column():
    report_rows = [EvalRow(name="a"), EvalRow(name="b")]
    from face_adapter.metrics import EvalReport

    report = EvalReport(
        rows=report_rows,
        retrieval=None,
        retrieval_counts=(0, 0),
        feature_values={},
        warnings=[],
    )
    assert report.mean("csim") is None
