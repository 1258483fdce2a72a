from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segeval.evaluate import (
    COCO_THRESHOLDS,
    THRESHOLDS_50_90,
    EvalConfig,
    EvalReport,
    EvaluationError,
    average_precision,
    average_recall,
    evaluate,
    match_frame,
    match_instances,
    pr_curve,
)
from segeval.model import AnnotatedFrame, Dataset, InstanceMask
from segeval.synth import ground_truth_as_predictions

from _problems import random_problem
from _reference import reference_evaluate
from conftest import frame_of, preds_of, rect

W, H = 40, 20


def two_gt_frame():
    return frame_of("f", [rect(W, H, 0, 0, 10, 10), rect(W, H, 20, 0, 30, 10)], [1, 1])


def test_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(thresholds=(0.5, 0.5))
    with pytest.raises(ValueError):
        EvalConfig(thresholds=(0.0, 0.5))
    with pytest.raises(ValueError):
        EvalConfig(max_detections=(10, 1))
    with pytest.raises(ValueError):
        EvalConfig(mode="semantic")
    assert len(COCO_THRESHOLDS) == 10 and COCO_THRESHOLDS[-1] == 0.95
    assert len(THRESHOLDS_50_90) == 9 and THRESHOLDS_50_90[-1] == 0.9


def test_match_threshold_examples():
    gt = [InstanceMask.from_bitmap(rect(W, H, 0, 0, 10, 10), 1)]
    # a 6x10 strip inside the 10x10 GT: IoU 60/100
    pred = preds_of([rect(W, H, 0, 0, 6, 10)], [1], [0.9])
    m = match_instances(gt, pred, 0.5)
    assert m.pred_to_gt == (0,) and m.true_positives == 1
    m = match_instances(gt, pred, 0.75)
    assert m.pred_to_gt == (-1,) and (m.false_positives, m.false_negatives) == (1, 1)


def test_higher_score_wins_the_gt():
    gt = [InstanceMask.from_bitmap(rect(W, H, 0, 0, 10, 10), 1)]
    preds = preds_of([rect(W, H, 0, 0, 9, 10), rect(W, H, 0, 0, 10, 10)], [1, 1], [0.8, 0.9])
    m = match_instances(gt, preds, 0.5)
    assert m.pred_to_gt == (-1, 0)
    assert m.gt_to_pred == (1,)


def test_tie_rules():
    # equal scores: earlier prediction goes first
    gt = [InstanceMask.from_bitmap(rect(W, H, 0, 0, 10, 10), 1)]
    same = preds_of([rect(W, H, 0, 0, 10, 10)] * 2, [1, 1], [0.5, 0.5])
    assert match_instances(gt, same, 0.5).pred_to_gt == (0, -1)
    # equal IoU with two GTs: the lower GT index is taken
    gts = [InstanceMask.from_bitmap(rect(W, H, 0, 0, 10, 10), 1), InstanceMask.from_bitmap(rect(W, H, 10, 0, 20, 10), 1)]
    straddle = preds_of([rect(W, H, 5, 0, 15, 10)], [1], [0.7])
    assert match_instances(gts, straddle, 0.3).pred_to_gt == (0,)


def test_pr_curve_examples():
    frame = two_gt_frame()
    perfect = ground_truth_as_predictions(Dataset((frame,)))["f"]
    fm = match_frame("f", 1, frame.instances, perfect, (0.5,), "mask", 100)
    pr = pr_curve([fm])
    assert pr.points()[-1] == (1.0, 1.0)
    assert average_precision(pr) == 1.0

    fm = match_frame("f", 1, frame.instances, [], (0.5,), "mask", 100)
    assert pr_curve([fm]).points() == []
    assert average_precision(pr_curve([fm])) == 0.0

    a_b = preds_of([rect(W, H, 0, 0, 10, 10), rect(W, H, 0, 12, 10, 20)], [1, 1], [0.9, 0.8])
    fm = match_frame("f", 1, frame.instances, a_b, (0.5,), "mask", 100)
    pr = pr_curve([fm])
    assert pr.points() == [(0.5, 1.0), (0.5, 0.5)]
    assert average_precision(pr) == pytest.approx(51 / 101, abs=1e-12)


def test_pr_curve_needs_ground_truth():
    fm = match_frame("f", 1, [], preds_of([rect(W, H, 0, 0, 2, 2)], [1], [0.5]), (0.5,), "mask", 100)
    with pytest.raises(EvaluationError):
        pr_curve([fm])


def test_average_recall_examples():
    frames = [replace(two_gt_frame(), frame_id=f"f{i}") for i in range(3)]
    ds = Dataset(tuple(frames))
    preds = ground_truth_as_predictions(ds)
    matches = [match_frame(f.frame_id, 1, f.instances, preds[f.frame_id], COCO_THRESHOLDS, "mask", 100) for f in frames]
    assert average_recall(matches, 100) == 1.0
    assert average_recall(matches, 1) == 0.5
    empty = [match_frame(f.frame_id, 1, f.instances, [], COCO_THRESHOLDS, "mask", 100) for f in frames]
    assert average_recall(empty, 100) == 0.0
    report = evaluate(ds, preds)
    assert report.ar(1) == 0.5 and report.ar(100) == 1.0


def test_self_evaluation_is_perfect(toy_dataset, small_synth):
    for ds in (toy_dataset, small_synth):
        preds = ground_truth_as_predictions(ds)
        for mode in ("binary", "multiclass"):
            for kind in ("mask", "bbox"):
                r = evaluate(ds, preds, EvalConfig(mode=mode, iou_kind=kind))
                assert r.ap50 == 1.0 and r.ap == 1.0 and r.ar(100) == 1.0


def test_cycled_categories():
    ds = Dataset(
        (
            frame_of("a", [rect(W, H, 0, 0, 8, 8), rect(W, H, 20, 5, 30, 15)], [1, 2]),
            frame_of("b", [rect(W, H, 3, 3, 13, 13)], [3]),
        )
    )
    preds = {
        fid: [InstanceMask(inst.category % 12 + 1, inst.mask, 1.0) for inst in ds.frame(fid).instances]
        for fid in ("a", "b")
    }
    assert evaluate(ds, preds, EvalConfig(mode="multiclass")).ap == 0.0
    assert evaluate(ds, preds, EvalConfig(mode="binary")).ap == 1.0


def test_aggregate_is_mean_of_threshold_aps(small_synth):
    from segeval.synth import PerturbationConfig, perturb_dataset

    preds = perturb_dataset(small_synth, PerturbationConfig(jitter=3, score_noise=0.3, spurious_rate=0.5, seed=2))
    r = evaluate(small_synth, preds)
    assert r.ap == pytest.approx(float(np.mean(r.ap_per_threshold())), abs=1e-15)
    assert len(r.ap_per_threshold()) == 10
    assert 0 <= r.ap <= r.ap50 <= 1
    r9 = evaluate(small_synth, preds, EvalConfig(thresholds=THRESHOLDS_50_90))
    assert len(r9.ap_per_threshold()) == 9
    assert r9.ap_per_threshold() == pytest.approx(r.ap_per_threshold()[:9], abs=1e-15)


def test_classes_without_ground_truth_are_excluded():
    ds = Dataset((frame_of("a", [rect(W, H, 0, 0, 8, 8)], [2]),))
    preds = {"a": preds_of([rect(W, H, 0, 0, 8, 8), rect(W, H, 20, 0, 28, 8)], [2, 5], [0.9, 0.8])}
    r = evaluate(ds, preds)
    assert [c.id for c in r.classes] == [2]
    assert r.ap == 1.0


def test_exclude_other(toy_dataset):
    preds = ground_truth_as_predictions(toy_dataset)
    names = [c.name for c in evaluate(toy_dataset, preds).classes]
    assert "Other" in names
    names = [c.name for c in evaluate(toy_dataset, preds, EvalConfig(exclude_other=True)).classes]
    assert "Other" not in names


def test_evaluate_errors():
    ds = Dataset((frame_of("a", [rect(W, H, 0, 0, 8, 8)], [2]),))
    with pytest.raises(EvaluationError):
        evaluate(Dataset(()), {})
    with pytest.raises(EvaluationError):
        evaluate(ds, {"zzz": []})
    with pytest.raises(EvaluationError):
        evaluate(ds, {"a": [InstanceMask.from_bitmap(rect(W, H, 0, 0, 8, 8), 2)]})
    empty = Dataset((AnnotatedFrame("e", W, H, "e.png"),))
    with pytest.raises(EvaluationError):
        evaluate(empty, {})


def test_report_json_round_trip(small_synth):
    preds = ground_truth_as_predictions(small_synth)
    r = evaluate(small_synth, preds, label="run")
    back = EvalReport.from_json(json.loads(json.dumps(r.to_json())))
    assert back.to_json() == r.to_json()
    assert back.summary() == r.summary()


def test_thread_count_does_not_change_the_report(small_synth):
    from segeval.synth import PerturbationConfig, perturb_dataset

    preds = perturb_dataset(small_synth, PerturbationConfig(jitter=2, score_noise=0.2, seed=5))
    base = evaluate(small_synth, preds).to_json()
    for threads in (2, 5):
        assert evaluate(small_synth, preds, threads=threads).to_json() == base


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["mask", "bbox"]), st.booleans())
def test_matches_reference_evaluator(seed, kind, binary):
    ds, preds, ref = random_problem(np.random.default_rng(seed))
    cfg = EvalConfig(iou_kind=kind, mode="binary" if binary else "multiclass")
    r = evaluate(ds, preds, cfg)
    ap_ref, ar_ref = reference_evaluate(ref, [1, 2, 3], cfg.thresholds, cfg.max_detections, kind, binary)
    assert r.ap_per_threshold() == pytest.approx(ap_ref, abs=1e-9)
    for m in cfg.max_detections:
        assert r.ar(m) == pytest.approx(ar_ref[m], abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ties_follow_input_order_like_reference(seed):
    ds, preds, ref = random_problem(np.random.default_rng(seed), tie_scores=True)
    r = evaluate(ds, preds)
    ap_ref, _ = reference_evaluate(ref, [1, 2, 3], COCO_THRESHOLDS, (1, 10, 100))
    assert r.ap_per_threshold() == pytest.approx(ap_ref, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ranking_only_dependence(seed):
    ds, preds, _ = random_problem(np.random.default_rng(seed))
    squashed = {k: [replace(p, score=p.score**3 / 2) for p in v] for k, v in preds.items()}
    a, b = evaluate(ds, preds), evaluate(ds, squashed)
    assert a.ap_per_threshold() == b.ap_per_threshold()
    assert [a.ar(m) for m in (1, 10, 100)] == [b.ar(m) for m in (1, 10, 100)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ap_is_antitone_in_threshold(seed):
    ds, preds, _ = random_problem(np.random.default_rng(seed))
    ap = evaluate(ds, preds).ap_per_threshold()
    assert all(b <= a + 1e-12 for a, b in zip(ap, ap[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_low_scoring_false_positive_never_helps(seed):
    ds, preds, _ = random_problem(np.random.default_rng(seed))
    floor = min([p.score for v in preds.values() for p in v], default=1.0)
    far = np.zeros((ds.frames[0].height, ds.frames[0].width), bool)
    far[0, 0] = True
    for cat in (1, 2, 3):
        extra = dict(preds)
        extra[ds.frames[0].frame_id] = list(preds[ds.frames[0].frame_id]) + [InstanceMask.from_bitmap(far, cat, floor / 2)]
        base, more = evaluate(ds, preds), evaluate(ds, extra)
        assert all(m <= b + 1e-12 for b, m in zip(base.ap_per_threshold(), more.ap_per_threshold()))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_removing_a_prediction_never_raises_recall(seed, which):
    ds, preds, _ = random_problem(np.random.default_rng(seed))
    fid = ds.frames[0].frame_id
    if not preds[fid]:
        return
    fewer = dict(preds)
    fewer[fid] = [p for i, p in enumerate(preds[fid]) if i != which % len(preds[fid])]
    base, less = evaluate(ds, preds), evaluate(ds, fewer)
    # only without an effective cap: under max_det=1 dropping a top-ranked
    # false positive lets a true positive in
    assert less.ar(100) <= base.ar(100) + 1e-12


def test_detection_cap_can_make_removal_raise_recall():
    gt = Dataset((frame_of("a", [rect(W, H, 0, 0, 8, 8)], [1]),))
    hit, miss = rect(W, H, 0, 0, 8, 8), rect(W, H, 20, 0, 28, 8)
    both = {"a": preds_of([miss, hit], [1, 1], [0.9, 0.5])}
    only_hit = {"a": preds_of([hit], [1], [0.5])}
    assert evaluate(gt, both).ar(1) == 0.0
    assert evaluate(gt, only_hit).ar(1) == 1.0
