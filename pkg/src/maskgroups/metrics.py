"""Group-level segmentation metrics (gIoU, cIoU, N-acc) and oracle analysis."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import IdMismatch, IndexOutOfRange
from .masks import intersection_union, iou, rle_decode


@dataclass
class GroupPrediction:
    sample_id: str
    selected: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.selected = frozenset(int(i) for i in self.selected)


@dataclass
class EvalReport:
    giou: float
    ciou: float
    n_acc: Optional[float]
    per_sample: list  # (sample_id, intersection, union, iou)

    def to_json(self) -> dict:
        return {
            "giou": self.giou,
            "ciou": self.ciou,
            "n_acc": self.n_acc,
            "per_sample": [
                {"sample_id": sid, "intersection": i, "union": u, "iou": v} for sid, i, u, v in self.per_sample
            ],
        }

    def dumps_json(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    def dumps_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_id", "intersection", "union", "iou"])
        for sid, i, u, v in self.per_sample:
            writer.writerow([sid, i, u, repr(float(v))])
        return buf.getvalue()


def sample_id(sample, index: int) -> str:
    """Stable per-dataset id: position in the file plus the scene id."""
    return f"{index}:{sample.scene_id}"


def group_union(masks: Sequence[np.ndarray], selected, shape: Optional[tuple] = None) -> np.ndarray:
    """Pixelwise OR of the selected masks (empty selection -> empty mask)."""
    if shape is None:
        if not masks:
            raise IndexOutOfRange("shape required when there are no masks")
        shape = masks[0].shape
    out = np.zeros(shape, dtype=bool)
    for i in sorted(selected):
        if not 0 <= i < len(masks):
            raise IndexOutOfRange(f"candidate index {i} outside {len(masks)} masks")
        out |= masks[i]
    return out


def _sample_shape(sample) -> tuple:
    if sample.candidates:
        c = sample.candidates[0]
        return (c.h, c.w)
    return (1, 1)


def summarize(rows: Sequence[tuple], n_gt_empty: int, n_both_empty: int) -> EvalReport:
    """Aggregate (sample_id, intersection, union, iou) rows.

    Rows with a zero union (prediction and target both empty) add 1 to gIoU
    but nothing to the cIoU sums.
    """
    if not rows:
        return EvalReport(0.0, 0.0, None, [])
    giou = float(sum(r[3] for r in rows)) / len(rows)
    inter = sum(r[1] for r in rows)
    union = sum(r[2] for r in rows)
    ciou = inter / union if union > 0 else 1.0
    n_acc = n_both_empty / n_gt_empty if n_gt_empty else None
    return EvalReport(giou, ciou, n_acc, list(rows))


def evaluate(predictions: Sequence[GroupPrediction], dataset: Sequence) -> EvalReport:
    if len(predictions) != len(dataset):
        raise IdMismatch(f"{len(predictions)} predictions for {len(dataset)} samples")
    rows = []
    n_gt_empty = n_both_empty = 0
    for k, (pred, sample) in enumerate(zip(predictions, dataset)):
        sid = sample_id(sample, k)
        if pred.sample_id != sid:
            raise IdMismatch(f"prediction {pred.sample_id!r} does not match sample {sid!r}")
        masks = [rle_decode(c) for c in sample.candidates]
        shape = _sample_shape(sample)
        pred_mask = group_union(masks, pred.selected, shape)
        gt_mask = group_union(masks, sample.targets, shape)
        inter, union = intersection_union(pred_mask, gt_mask)
        rows.append((sid, inter, union, iou(pred_mask, gt_mask)))
        if not sample.targets:
            n_gt_empty += 1
            if not pred.selected:
                n_both_empty += 1
    return summarize(rows, n_gt_empty, n_both_empty)


def oracle_select(candidates: Sequence[np.ndarray], gt_targets: Sequence[np.ndarray]) -> set:
    """For each target, the candidate of highest IoU (ties -> lowest index)."""
    chosen = set()
    if not candidates:
        return chosen
    for gt in gt_targets:
        scores = [iou(c, gt) for c in candidates]
        chosen.add(int(np.argmax(scores)))
    return chosen


def oracle_predictions(dataset: Sequence) -> list[GroupPrediction]:
    """Oracle selection when targets are candidates of the same sample."""
    out = []
    for k, s in enumerate(dataset):
        masks = [rle_decode(c) for c in s.candidates]
        out.append(GroupPrediction(sample_id(s, k), oracle_select(masks, [masks[t] for t in s.targets])))
    return out


def oracle_ciou(scenes: Sequence, cfg) -> EvalReport:
    """Oracle cIoU of the candidates proposed under ``cfg``.

    Ground truth is taken from the scene annotations (every rule group with
    all its entities), so targets dropped from the candidate pool still count
    against the oracle.
    """
    from .datagen import label_universe, propose_candidates, scene_groups

    cfg.validate()
    universe = cfg.label_universe if cfg.label_universe is not None else label_universe(scenes)
    excluded = set(map(str, cfg.exclusion_ids))
    rows = []
    n_gt_empty = n_both_empty = 0
    for scene in scenes:
        if scene.scene_id in excluded:
            continue
        candidates, _ = propose_candidates(scene, cfg)
        cand_masks = [rle_decode(c) for c in candidates]
        shape = (scene.height, scene.width)
        by_id = {e.entity_id: e.mask for e in scene.entities}
        for k, g in enumerate(scene_groups(scene, cfg, universe)):
            gt = [by_id[t] for t in g.target_ids]
            chosen = oracle_select(cand_masks, gt)
            pred_mask = group_union(cand_masks, chosen, shape)
            gt_mask = group_union(gt, range(len(gt)), shape)
            inter, union = intersection_union(pred_mask, gt_mask)
            rows.append((f"{scene.scene_id}:{k}", inter, union, iou(pred_mask, gt_mask)))
            if not gt:
                n_gt_empty += 1
                n_both_empty += not chosen
    return summarize(rows, n_gt_empty, n_both_empty)


def oracle_sweep(scenes: Sequence, base_cfg, p_miss_grid=(0.0, 0.25, 0.5, 1.0), distractor_grid=(0,)) -> list[dict]:
    """Oracle cIoU for every (p_miss, distractors) pair on matched scenes."""
    from dataclasses import replace

    table = []
    for p in p_miss_grid:
        for n in distractor_grid:
            cfg = replace(base_cfg, p_miss=float(p), distractors_per_scene=int(n))
            report = oracle_ciou(scenes, cfg)
            table.append({"p_miss": float(p), "distractors": int(n), "oracle_ciou": report.ciou})
    return table
