"""Turn object-level scene annotations into referring mask-group samples.

Rules: same category, same attribute, absolute and relative position,
shared relations, absent categories (no-target) and pre-paired free-form
expressions. Candidates come from :func:`propose_candidates`, which mixes
ground-truth masks with perturbed distractors.
"""
from __future__ import annotations

import json
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import SceneMismatch, SchemaError
from .masks import (
    BBox,
    Dilate,
    Erode,
    MergeWith,
    RleMask,
    SplitHalf,
    Translate,
    as_mask,
    bbox_of,
    iou,
    perturb,
    rle_decode,
    rle_encode,
)

MASK_REF = "<mask-ref>"
PROVENANCES = (
    "category",
    "attribute",
    "position_abs",
    "position_rel",
    "relation",
    "freeform",
    "no_target",
)
RULES = ("category", "attribute", "position_abs", "position_rel", "relation", "no_target")

CATEGORY_TEXT = "Select all {category}"
CATEGORY_REF = "Segment everything of the same class as <mask-ref>."
ATTRIBUTE_TEXT = "Select all {attribute} objects"
ATTRIBUTE_REF = "Find all the objects with the same attribute as <mask-ref> in the image."
POSITION_ABS = "Locate all the items on the {where} of the image."
POSITION_REL = "Find all the objects {how} <mask-ref>."
RELATION_SUBJECT = "Select all objects that <mask-ref> {relation}."
RELATION_OBJECT = "Select all objects that {relation} <mask-ref>."
FREEFORM = "Select the {expression} in the image."

ABS_WORDING = {"left": "left side", "right": "right side", "top": "top", "bottom": "bottom"}
REL_WORDING = {"left": "left of", "right": "right of", "top": "above", "bottom": "below"}
DIRECTIONS = ("left", "right", "top", "bottom")


@dataclass
class Entity:
    entity_id: int
    category: str
    attributes: list
    bbox: BBox
    mask: np.ndarray = field(repr=False)
    relations: list = field(default_factory=list)  # (label, object entity_id)


@dataclass
class SceneAnnotation:
    scene_id: str
    width: int
    height: int
    entities: list

    def entity(self, entity_id: int) -> Entity:
        for e in self.entities:
            if e.entity_id == entity_id:
                return e
        raise KeyError(entity_id)


@dataclass
class GroupSample:
    scene_id: str
    candidates: list  # RleMask
    prompt: str
    ref_indices: list
    targets: list
    provenance: str

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "candidates": [c.to_json() for c in self.candidates],
            "prompt": self.prompt,
            "ref_indices": list(self.ref_indices),
            "targets": sorted(self.targets),
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroupSample":
        try:
            sample = cls(
                scene_id=str(obj["scene_id"]),
                candidates=[RleMask.from_json(c) for c in obj["candidates"]],
                prompt=str(obj["prompt"]),
                ref_indices=[int(i) for i in obj["ref_indices"]],
                targets=sorted(int(i) for i in obj["targets"]),
                provenance=str(obj["provenance"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed group sample: {exc}") from exc
        check_sample(sample)
        return sample

    def candidate_masks(self) -> list[np.ndarray]:
        return [rle_decode(c) for c in self.candidates]


def check_sample(sample: GroupSample) -> None:
    n = len(sample.candidates)
    if sample.prompt.count(MASK_REF) != len(sample.ref_indices):
        raise SchemaError("placeholder count does not match ref_indices")
    for i in list(sample.ref_indices) + list(sample.targets):
        if not 0 <= i < n:
            raise SchemaError(f"index {i} outside {n} candidates")
    if len(set(sample.targets)) != len(sample.targets):
        raise SchemaError("duplicate target index")
    if sample.provenance not in PROVENANCES:
        raise SchemaError(f"unknown provenance {sample.provenance!r}")


@dataclass
class GenConfig:
    theta_merge: float = 0.5
    delta_pos: float = 0.05
    p_miss: float = 0.0
    distractors_per_scene: int = 0
    exclusion_ids: list = field(default_factory=list)
    seed: int = 0
    rules: list = field(default_factory=lambda: list(RULES))
    # None keeps every attribute label
    attributes: Optional[list] = None
    include_ref_in_targets: bool = True
    label_universe: Optional[list] = None
    max_no_target: int = 2

    def validate(self) -> None:
        from .errors import ConfigInvalid

        if not 0 < self.theta_merge <= 1:
            raise ConfigInvalid("theta_merge must lie in (0, 1]")
        if not 0 <= self.delta_pos < 0.5:
            raise ConfigInvalid("delta_pos must lie in [0, 0.5)")
        if not 0 <= self.p_miss <= 1:
            raise ConfigInvalid("p_miss must lie in [0, 1]")
        if self.distractors_per_scene < 0:
            raise ConfigInvalid("distractors_per_scene must be >= 0")
        unknown = set(self.rules) - set(RULES)
        if unknown:
            raise ConfigInvalid(f"unknown rules {sorted(unknown)}")


# Groups are first expressed over entity ids, then mapped onto candidates.
@dataclass(frozen=True)
class Group:
    prompt: str
    ref_ids: tuple
    target_ids: tuple
    provenance: str


def _as_samples(scene: SceneAnnotation, groups: Iterable[Group]) -> list[GroupSample]:
    candidates = [rle_encode(e.mask) for e in scene.entities]
    index = {e.entity_id: i for i, e in enumerate(scene.entities)}
    return [
        GroupSample(
            scene.scene_id,
            candidates,
            g.prompt,
            [index[r] for r in g.ref_ids],
            sorted(index[t] for t in g.target_ids),
            g.provenance,
        )
        for g in groups
    ]


def merge_annotations(a: SceneAnnotation, b: SceneAnnotation, theta_merge: float = 0.5) -> SceneAnnotation:
    """Fuse b's instances into a where masks overlap by IoU >= theta_merge.

    A fused entity keeps a's id and category, takes the union of attribute
    lists and b's (finer) mask; unmatched b instances are appended with fresh
    ids.
    """
    if a.scene_id != b.scene_id or (a.width, a.height) != (b.width, b.height):
        raise SceneMismatch(f"cannot merge {a.scene_id} ({a.width}x{a.height}) with {b.scene_id} ({b.width}x{b.height})")
    merged = [replace(e, attributes=list(e.attributes), relations=list(e.relations)) for e in a.entities]
    next_id = max((e.entity_id for e in a.entities), default=-1) + 1
    id_map = {}
    for eb in b.entities:
        best, best_iou = None, -1.0
        for ea in merged[: len(a.entities)]:
            score = iou(ea.mask, eb.mask)
            if score > best_iou:
                best, best_iou = ea, score
        if best is not None and best_iou >= theta_merge:
            for attr in eb.attributes:
                if attr not in best.attributes:
                    best.attributes.append(attr)
            best.mask = eb.mask.copy()
            best.bbox = bbox_of(best.mask) if best.mask.any() else best.bbox
            id_map[eb.entity_id] = best.entity_id
        else:
            new = replace(eb, entity_id=next_id, attributes=list(eb.attributes), relations=[])
            id_map[eb.entity_id] = next_id
            next_id += 1
            merged.append(new)
    by_id = {e.entity_id: e for e in merged}
    for eb in b.entities:
        subj = by_id[id_map[eb.entity_id]]
        for label, obj in eb.relations:
            rel = (label, id_map.get(obj, obj))
            if rel not in subj.relations:
                subj.relations.append(rel)
    return SceneAnnotation(a.scene_id, a.width, a.height, merged)


# Rules -------------------------------------------------------------------


def category_groups(scene: SceneAnnotation, include_ref: bool = True) -> list[Group]:
    by_cat = defaultdict(list)
    for e in scene.entities:
        by_cat[e.category].append(e.entity_id)
    out = []
    for cat in sorted(by_cat):
        ids = sorted(by_cat[cat])
        if len(ids) < 2:
            continue
        out.append(Group(CATEGORY_TEXT.format(category=cat), (), tuple(ids), "category"))
        ref = ids[0]
        targets = ids if include_ref else ids[1:]
        out.append(Group(CATEGORY_REF, (ref,), tuple(targets), "category"))
    return out


def attribute_groups(scene: SceneAnnotation, allowed: Optional[Sequence[str]] = None, include_ref: bool = True) -> list[Group]:
    holders = defaultdict(list)
    for e in scene.entities:
        for a in e.attributes:
            if allowed is None or a in allowed:
                holders[a].append(e.entity_id)
    out = []
    for attr in sorted(holders):
        ids = sorted(set(holders[attr]))
        if len(ids) < 2:
            continue
        out.append(Group(ATTRIBUTE_TEXT.format(attribute=attr), (), tuple(ids), "attribute"))
        targets = ids if include_ref else ids[1:]
        out.append(Group(ATTRIBUTE_REF, (ids[0],), tuple(targets), "attribute"))
    return out


def _is_absolute(direction: str, cx: float, cy: float, w: int, h: int, delta: float) -> bool:
    if direction == "left":
        return cx < (0.5 - delta) * w
    if direction == "right":
        return cx > (0.5 + delta) * w
    if direction == "top":
        return cy < (0.5 - delta) * h
    return cy > (0.5 + delta) * h


def is_relative(direction: str, a: tuple, b: tuple, w: int, h: int, delta: float) -> bool:
    """Whether center ``a`` lies in ``direction`` of center ``b``."""
    if direction == "left":
        return a[0] < b[0] - delta * w
    if direction == "right":
        return a[0] > b[0] + delta * w
    if direction == "top":
        return a[1] < b[1] - delta * h
    return a[1] > b[1] + delta * h


def position_groups(scene: SceneAnnotation, delta_pos: float = 0.05, relative: bool = True, absolute: bool = True) -> list[Group]:
    w, h = scene.width, scene.height
    centers = {e.entity_id: e.bbox.center for e in scene.entities}
    ids = sorted(centers)
    out = []
    if absolute:
        for d in DIRECTIONS:
            members = [i for i in ids if _is_absolute(d, *centers[i], w, h, delta_pos)]
            if members:
                out.append(Group(POSITION_ABS.format(where=ABS_WORDING[d]), (), tuple(members), "position_abs"))
    if relative:
        for anchor in ids:
            for d in DIRECTIONS:
                members = [i for i in ids if i != anchor and is_relative(d, centers[i], centers[anchor], w, h, delta_pos)]
                if members:
                    out.append(Group(POSITION_REL.format(how=REL_WORDING[d]), (anchor,), tuple(members), "position_rel"))
    return out


def relation_groups(scene: SceneAnnotation) -> list[Group]:
    by_subject = defaultdict(set)
    by_object = defaultdict(set)
    for e in scene.entities:
        for label, obj in e.relations:
            by_subject[(e.entity_id, label)].add(obj)
            by_object[(obj, label)].add(e.entity_id)
    out = []
    for (subj, label), objs in sorted(by_subject.items()):
        if len(objs) >= 2:
            out.append(Group(RELATION_SUBJECT.format(relation=label), (subj,), tuple(sorted(objs)), "relation"))
    for (obj, label), subjs in sorted(by_object.items()):
        if len(subjs) >= 2:
            out.append(Group(RELATION_OBJECT.format(relation=label), (obj,), tuple(sorted(subjs)), "relation"))
    return out


def no_target_groups(scene: SceneAnnotation, universe: Iterable[str], limit: int = 2) -> list[Group]:
    present = {e.category for e in scene.entities}
    absent = sorted(set(universe) - present)[:limit]
    return [Group(CATEGORY_TEXT.format(category=c), (), (), "no_target") for c in absent]


def freeform_group(expression: str, target_ids: Sequence[int]) -> Group:
    return Group(FREEFORM.format(expression=expression), (), tuple(sorted(target_ids)), "freeform")


def gen_category_groups(scene: SceneAnnotation, include_ref: bool = True) -> list[GroupSample]:
    return _as_samples(scene, category_groups(scene, include_ref))


def gen_attribute_groups(scene: SceneAnnotation, allowed=None, include_ref: bool = True) -> list[GroupSample]:
    return _as_samples(scene, attribute_groups(scene, allowed, include_ref))


def gen_position_groups(scene: SceneAnnotation, delta_pos: float = 0.05) -> list[GroupSample]:
    return _as_samples(scene, position_groups(scene, delta_pos))


def gen_relation_groups(scene: SceneAnnotation) -> list[GroupSample]:
    return _as_samples(scene, relation_groups(scene))


def gen_no_target_groups(scene: SceneAnnotation, universe: Iterable[str], limit: int = 2) -> list[GroupSample]:
    return _as_samples(scene, no_target_groups(scene, universe, limit))


def scene_groups(scene: SceneAnnotation, cfg: GenConfig, universe: Sequence[str]) -> list[Group]:
    """All rule groups for one scene in the fixed generator order."""
    rules = set(cfg.rules)
    out: list[Group] = []
    if "category" in rules:
        out += category_groups(scene, cfg.include_ref_in_targets)
    if "attribute" in rules:
        out += attribute_groups(scene, cfg.attributes, cfg.include_ref_in_targets)
    if "position_abs" in rules or "position_rel" in rules:
        out += position_groups(scene, cfg.delta_pos, relative="position_rel" in rules, absolute="position_abs" in rules)
    if "relation" in rules:
        out += relation_groups(scene)
    if "no_target" in rules:
        out += no_target_groups(scene, universe, cfg.max_no_target)
    return out


# Candidates --------------------------------------------------------------


def scene_rng(seed: int, scene_id: str, stream: int) -> np.random.Generator:
    """Independent generator per (seed, scene, stream); order-insensitive."""
    key = zlib.crc32(scene_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key, stream)))


STREAM_DROP, STREAM_DISTRACT, STREAM_ORDER = 0, 1, 2


def make_distractor(scene: SceneAnnotation, rng: np.random.Generator, max_tries: int = 20) -> np.ndarray:
    """A non-empty perturbed, merged or split version of some entity mask."""
    ents = [e for e in scene.entities if e.mask.any()]
    if not ents:
        return np.zeros((scene.height, scene.width), dtype=bool)
    for _ in range(max_tries):
        base = ents[int(rng.integers(len(ents)))]
        kind = int(rng.integers(5))
        if kind == 0:
            box = base.bbox
            span = max(box.x_max - box.x_min, box.y_max - box.y_min)
            dx = int(rng.integers(span // 2, span + 1)) * (1 if rng.random() < 0.5 else -1)
            dy = int(rng.integers(span // 2, span + 1)) * (1 if rng.random() < 0.5 else -1)
            spec = Translate(dx, dy)
        elif kind == 1:
            spec = Dilate(int(rng.integers(2, 5)))
        elif kind == 2:
            spec = Erode(int(rng.integers(1, 3)))
        elif kind == 3:
            other = ents[int(rng.integers(len(ents)))]
            if other is base:
                continue
            spec = MergeWith(other.mask)
        else:
            spec = SplitHalf(int(rng.integers(2)))
        out = perturb(base.mask, spec, rng)
        if out.any() and not any(np.array_equal(out, e.mask) for e in ents):
            return out
    return perturb(ents[0].mask, Dilate(1), rng)


def propose_candidates(scene: SceneAnnotation, cfg: GenConfig) -> tuple[list[RleMask], dict]:
    """Ground-truth masks (some dropped) interleaved with distractors.

    Returns the candidate list and a map from surviving entity id to candidate
    index. Drop decisions use one uniform draw per entity, so raising p_miss
    only ever drops more masks of the same scene.
    """
    drop_rng = scene_rng(cfg.seed, scene.scene_id, STREAM_DROP)
    draws = drop_rng.random(len(scene.entities))
    kept = [e for e, u in zip(scene.entities, draws) if not u < cfg.p_miss]

    dis_rng = scene_rng(cfg.seed, scene.scene_id, STREAM_DISTRACT)
    distractors = [make_distractor(scene, dis_rng) for _ in range(cfg.distractors_per_scene)]

    order_rng = scene_rng(cfg.seed, scene.scene_id, STREAM_ORDER)
    total = len(kept) + len(distractors)
    slots = np.zeros(total, dtype=bool)  # True marks a distractor slot
    if distractors:
        slots[order_rng.choice(total, size=len(distractors), replace=False)] = True
    candidates, index = [], {}
    gt_iter, dis_iter = iter(kept), iter(distractors)
    for k, is_distractor in enumerate(slots):
        if is_distractor:
            candidates.append(rle_encode(next(dis_iter)))
        else:
            e = next(gt_iter)
            index[e.entity_id] = k
            candidates.append(rle_encode(e.mask))
    return candidates, index


def label_universe(scenes: Sequence[SceneAnnotation]) -> list[str]:
    return sorted({e.category for s in scenes for e in s.entities})


def scene_samples(scene: SceneAnnotation, cfg: GenConfig, universe: Sequence[str], extra: Sequence[Group] = ()) -> list[GroupSample]:
    candidates, index = propose_candidates(scene, cfg)
    out = []
    for g in list(scene_groups(scene, cfg, universe)) + list(extra):
        if any(r not in index for r in g.ref_ids):
            continue
        targets = sorted(index[t] for t in g.target_ids if t in index)
        if not targets and g.provenance != "no_target":
            continue
        out.append(GroupSample(scene.scene_id, candidates, g.prompt, [index[r] for r in g.ref_ids], targets, g.provenance))
    return out


def build_dataset(
    scenes: Sequence[SceneAnnotation],
    cfg: GenConfig,
    freeform: Optional[dict] = None,
) -> list[GroupSample]:
    """Generate samples for every non-excluded scene in deterministic order.

    ``freeform`` maps scene_id to ``[(expression, target entity ids), ...]``
    records that pass straight through as free-form samples.
    """
    cfg.validate()
    excluded = set(map(str, cfg.exclusion_ids))
    universe = cfg.label_universe if cfg.label_universe is not None else label_universe(scenes)
    out = []
    for scene in scenes:
        if scene.scene_id in excluded:
            continue
        extra = [freeform_group(expr, ids) for expr, ids in (freeform or {}).get(scene.scene_id, [])]
        out.extend(scene_samples(scene, cfg, universe, extra))
    return out


def provenance_counts(samples: Iterable[GroupSample]) -> dict:
    counts = Counter(s.provenance for s in samples)
    return {p: counts.get(p, 0) for p in PROVENANCES}


# Files -------------------------------------------------------------------

SCENES_FORMAT = "maskgroups-scenes"


def scenes_to_json(scenes: Sequence[SceneAnnotation]) -> dict:
    """COCO-shaped document: images, annotations, relations."""
    images, annotations, relations = [], [], []
    for s in scenes:
        images.append({"id": s.scene_id, "width": s.width, "height": s.height})
        for e in s.entities:
            annotations.append(
                {
                    "id": e.entity_id,
                    "image_id": s.scene_id,
                    "category": e.category,
                    "attributes": list(e.attributes),
                    "bbox": e.bbox.as_list(),
                    "segmentation": rle_encode(e.mask).to_json(),
                }
            )
            for label, obj in e.relations:
                relations.append({"image_id": s.scene_id, "subject": e.entity_id, "relation": label, "object": obj})
    return {"format": SCENES_FORMAT, "version": 1, "images": images, "annotations": annotations, "relations": relations}


def scenes_from_json(doc: dict) -> list[SceneAnnotation]:
    if doc.get("format") != SCENES_FORMAT:
        raise SchemaError("not a scenes document")
    try:
        scenes = {}
        for img in doc["images"]:
            sid = str(img["id"])
            scenes[sid] = SceneAnnotation(sid, int(img["width"]), int(img["height"]), [])
        for ann in doc["annotations"]:
            scene = scenes[str(ann["image_id"])]
            mask = rle_decode(RleMask.from_json(ann["segmentation"]))
            if mask.shape != (scene.height, scene.width):
                raise SchemaError(f"mask size mismatch in scene {scene.scene_id}")
            x0, y0, x1, y1 = (int(v) for v in ann["bbox"])
            scene.entities.append(
                Entity(int(ann["id"]), str(ann["category"]), list(ann.get("attributes", [])), BBox(x0, y0, x1, y1), mask, [])
            )
        for rel in doc.get("relations", []):
            scene = scenes[str(rel["image_id"])]
            scene.entity(int(rel["subject"])).relations.append((str(rel["relation"]), int(rel["object"])))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"malformed scenes document: {exc}") from exc
    for s in scenes.values():
        ids = [e.entity_id for e in s.entities]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"duplicate entity id in scene {s.scene_id}")
    return list(scenes.values())


def write_scenes(path, scenes: Sequence[SceneAnnotation]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scenes_to_json(scenes), f, separators=(",", ":"))
        f.write("\n")


def read_scenes(path) -> list[SceneAnnotation]:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
    return scenes_from_json(doc)


def dumps_dataset(samples: Iterable[GroupSample]) -> str:
    return "".join(json.dumps(s.to_json(), separators=(",", ":")) + "\n" for s in samples)


def write_dataset(path, samples: Iterable[GroupSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_dataset(samples))


def read_dataset(path) -> list[GroupSample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            out.append(GroupSample.from_json(obj))
    return out


def read_freeform(path) -> dict:
    """JSON-lines records ``{"scene_id", "expression", "targets": [entity ids]}``."""
    out = defaultdict(list)
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[str(rec["scene_id"])].append((str(rec["expression"]), [int(t) for t in rec["targets"]]))
    return dict(out)
