import json

import numpy as np
import pytest

from maskgroups.datagen import GenConfig, GroupSample
from maskgroups.errors import IdMismatch, IndexOutOfRange
from maskgroups.masks import rle_encode
from maskgroups.metrics import (
    EvalReport,
    GroupPrediction,
    evaluate,
    group_union,
    oracle_select,
    oracle_sweep,
    sample_id,
    summarize,
)
from maskgroups.synth import SceneConfig, sample_scenes


def sample_from(masks, targets, scene="s"):
    return GroupSample(scene, [rle_encode(m) for m in masks], "Select all circle", [], sorted(targets), "category")


def test_group_union_examples():
    a = np.zeros((3, 3), bool)
    a[0, :] = True
    b = np.zeros((3, 3), bool)
    b[:, 0] = True
    assert not group_union([a, b], set()).any()
    np.testing.assert_array_equal(group_union([a, b], {0}), a)
    assert group_union([a, b], {0, 1}).sum() == 5
    with pytest.raises(IndexOutOfRange):
        group_union([a], {1})


def test_summarize_hand_counted():
    report = summarize([("a", 2, 4, 0.5), ("b", 1, 1, 1.0)], 0, 0)
    assert report.ciou == pytest.approx(0.6)
    assert report.giou == pytest.approx(0.75)
    assert report.n_acc is None


def test_evaluate_perfect_and_n_acc():
    rng = np.random.default_rng(0)
    masks = [rng.random((5, 5)) < 0.3 for _ in range(3)]
    data = [sample_from(masks, [0, 2]), sample_from(masks, []), sample_from(masks, []), sample_from(masks, [])]
    preds = [
        GroupPrediction(sample_id(data[0], 0), {0, 2}),
        GroupPrediction(sample_id(data[1], 1), set()),
        GroupPrediction(sample_id(data[2], 2), set()),
        GroupPrediction(sample_id(data[3], 3), {1}),
    ]
    report = evaluate(preds, data)
    assert report.n_acc == pytest.approx(2 / 3)
    perfect = evaluate([GroupPrediction(sample_id(s, k), s.targets) for k, s in enumerate(data)], data)
    assert perfect.giou == 1.0 and perfect.ciou == 1.0


def test_evaluate_id_mismatch():
    m = [np.ones((2, 2), bool)]
    data = [sample_from(m, [0])]
    with pytest.raises(IdMismatch):
        evaluate([GroupPrediction("wrong", {0})], data)
    with pytest.raises(IdMismatch):
        evaluate([], data)


def brute_force_report(preds, data):
    """Pixel loops over plain lists; shares nothing with the library."""
    giou_sum, inter_sum, union_sum, gt_empty, both_empty = 0.0, 0, 0, 0, 0
    rows = []
    for pred, s in zip(preds, data):
        h, w = s.candidates[0].h, s.candidates[0].w
        grids = []
        for rle in s.candidates:
            flat, val = [], 0
            for c in rle.counts:
                flat += [val] * c
                val = 1 - val
            grids.append([[flat[x * h + y] for x in range(w)] for y in range(h)])
        inter = union = 0
        for y in range(h):
            for x in range(w):
                p = any(grids[i][y][x] for i in pred.selected)
                g = any(grids[i][y][x] for i in s.targets)
                inter += p and g
                union += p or g
        sample_iou = 1.0 if union == 0 else inter / union
        rows.append((inter, union))
        giou_sum += sample_iou
        inter_sum += inter
        union_sum += union
        if not s.targets:
            gt_empty += 1
            both_empty += not pred.selected
    n = len(data)
    return rows, giou_sum / n, inter_sum / union_sum if union_sum else 1.0, both_empty / gt_empty if gt_empty else None


def test_evaluate_matches_brute_force_small():
    rng = np.random.default_rng(5)
    for _ in range(10):
        data, preds = [], []
        for k in range(int(rng.integers(1, 5))):
            masks = [rng.random((4, 5)) < 0.3 for _ in range(int(rng.integers(1, 4)))]
            tg = [i for i in range(len(masks)) if rng.random() < 0.5]
            s = sample_from(masks, tg)
            data.append(s)
            preds.append(GroupPrediction(sample_id(s, k), {i for i in range(len(masks)) if rng.random() < 0.5}))
        report = evaluate(preds, data)
        rows, giou, ciou, n_acc = brute_force_report(preds, data)
        assert [(r[1], r[2]) for r in report.per_sample] == rows
        assert abs(report.giou - giou) < 1e-12 and abs(report.ciou - ciou) < 1e-12
        assert report.n_acc == n_acc or abs(report.n_acc - n_acc) < 1e-12


def test_metrics_invariant_to_order():
    rng = np.random.default_rng(2)
    rows = [(str(i), int(a), int(a + b), a / (a + b) if a + b else 1.0) for i, (a, b) in enumerate(rng.integers(0, 9, (20, 2)))]
    r1 = summarize(rows, 0, 0)
    r2 = summarize(rows[::-1], 0, 0)
    assert r1.giou == pytest.approx(r2.giou, abs=1e-15) and r1.ciou == r2.ciou


def test_report_serialization():
    report = EvalReport(0.5, 0.25, None, [("0:s", 1, 4, 0.25)])
    assert json.loads(report.dumps_json())["ciou"] == 0.25
    assert report.dumps_csv().splitlines()[0] == "sample_id,intersection,union,iou"


def test_oracle_select_examples():
    g = np.zeros((4, 4), bool)
    g[:2, :2] = True
    near = g.copy()
    near[2, 0] = True  # iou 0.8
    far = np.zeros((4, 4), bool)
    far[:1, :2] = True  # iou 0.5
    assert oracle_select([near, far], [g]) == {0}
    assert oracle_select([far, near], [g]) == {1}
    # two gts sharing their best candidate
    assert oracle_select([near, np.zeros((4, 4), bool)], [g, near]) == {0}
    assert oracle_select([g, far], []) == set()


def test_oracle_select_tie_lowest_index():
    g = np.ones((2, 2), bool)
    assert oracle_select([g, g.copy()], [g]) == {0}


def test_oracle_dominance_over_random_predictions():
    rng = np.random.default_rng(11)
    data = []
    for _ in range(20):
        masks = [rng.random((6, 6)) < 0.3 for _ in range(4)]
        data.append(sample_from(masks, [i for i in range(4) if rng.random() < 0.5] or [0]))
    oracle = evaluate(
        [GroupPrediction(sample_id(s, k), oracle_select(s.candidate_masks(), [s.candidate_masks()[t] for t in s.targets])) for k, s in enumerate(data)],
        data,
    )
    for _ in range(20):
        preds = [GroupPrediction(sample_id(s, k), {i for i in range(4) if rng.random() < 0.5}) for k, s in enumerate(data)]
        assert oracle.ciou >= evaluate(preds, data).ciou


def test_oracle_sweep_extremes():
    scenes = [s.annotation for s in sample_scenes(8, 3, SceneConfig(max_pair_iou=0.0))]
    cfg = GenConfig(rules=["category", "position_abs"], distractors_per_scene=2)
    table = oracle_sweep(scenes, cfg, (0.0, 1.0), (0, 2))
    assert len(table) == 4
    by_key = {(r["p_miss"], r["distractors"]): r["oracle_ciou"] for r in table}
    assert by_key[(0.0, 0)] == 1.0 and by_key[(0.0, 2)] == 1.0
    assert by_key[(1.0, 0)] == 0.0
