"""Mask tokenization inputs: pooled ensemble features per candidate mask."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import EmptyMask
from ..masks import bbox_of, center_cell, downsample, mask_pool, rle_decode
from ..synth import FEATURE_DIM, encode_ensemble, render_annotation


def pooled_features(feature_maps: Sequence[np.ndarray], mask: np.ndarray) -> np.ndarray:
    """Concatenate the mask-pooled vector of every map (fixed encoder order)."""
    parts = []
    for fm in feature_maps:
        gh, gw = fm.shape[1:]
        cov = downsample(mask, gh, gw)
        parts.append(mask_pool(fm, cov, center_cell(mask, gh, gw)))
    return np.concatenate(parts)


def tokenize_mask(feature_maps: Sequence[np.ndarray], mask: np.ndarray, params) -> np.ndarray:
    """Mask token: pooled ensemble features passed through the projector."""
    from .selector import project

    tok, _ = project(params, pooled_features(feature_maps, mask)[None])
    return tok[0]


def candidate_boxes(sample) -> list:
    """Bounding boxes of the candidates (None for empty masks)."""
    out = []
    for c in sample.candidates:
        try:
            out.append(bbox_of(rle_decode(c)))
        except EmptyMask:
            out.append(None)
    return out


class FeatureBank:
    """Caches feature maps per scene and pooled features per candidate list."""

    def __init__(self, scenes: Sequence = (), image_fn: Callable = render_annotation):
        self.scenes = {s.scene_id: s for s in scenes}
        self.image_fn = image_fn
        self._maps: dict = {}
        self._pooled: dict = {}
        self._boxes: dict = {}

    def add_scenes(self, scenes: Sequence) -> None:
        for s in scenes:
            self.scenes[s.scene_id] = s

    def maps(self, scene_id: str) -> list[np.ndarray]:
        if scene_id not in self._maps:
            self._maps[scene_id] = encode_ensemble(self.image_fn(self.scenes[scene_id]))
        return self._maps[scene_id]

    def sample_features(self, sample) -> np.ndarray:
        key = (sample.scene_id, tuple(c.counts for c in sample.candidates))
        out = self._pooled.get(key)
        if out is None:
            fms = self.maps(sample.scene_id)
            rows = [pooled_features(fms, rle_decode(c)) for c in sample.candidates]
            out = np.array(rows).reshape(len(rows), FEATURE_DIM)
            self._pooled[key] = out
        return out

    def boxes(self, sample) -> list:
        key = (sample.scene_id, tuple(c.counts for c in sample.candidates))
        out = self._boxes.get(key)
        if out is None:
            out = self._boxes[key] = candidate_boxes(sample)
        return out
