"""Binary mask primitives: run-length coding, geometry, IoU, area-exact
downsampling, mask pooling and perturbations.

A binary mask is a 2-D ``numpy`` bool array of shape ``(height, width)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyMask, IllegalZeroRun, SumMismatch


@dataclass(frozen=True)
class RleMask:
    """Column-major run-length encoding; the first run is background."""

    w: int
    h: int
    counts: tuple

    def to_json(self) -> dict:
        return {"w": self.w, "h": self.h, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        return cls(int(obj["w"]), int(obj["h"]), tuple(int(c) for c in obj["counts"]))


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box ``[x_min, x_max) x [y_min, y_max)``."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


def as_mask(bits) -> np.ndarray:
    m = np.asarray(bits, dtype=bool)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionMismatch(f"expected a non-empty 2-D mask, got shape {m.shape}")
    return m


def rle_encode(mask: np.ndarray) -> RleMask:
    m = as_mask(mask)
    h, w = m.shape
    flat = m.ravel(order="F").astype(np.int8)
    # run boundaries, with a virtual leading background pixel
    change = np.flatnonzero(np.diff(np.concatenate(([0], flat))))
    edges = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(edges)
    return RleMask(w, h, tuple(int(c) for c in counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    counts = np.asarray(rle.counts, dtype=np.int64)
    total = rle.w * rle.h
    if counts.size == 0 or int(counts.sum()) != total:
        raise SumMismatch(f"counts sum to {int(counts.sum())}, expected {total}")
    if np.any(counts[1:] <= 0) or counts[0] < 0:
        raise IllegalZeroRun("only the first run length may be zero")
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((rle.h, rle.w), order="F")


def area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")


def intersection_union(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    a, b = as_mask(a), as_mask(b)
    _check_same_shape(a, b)
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return inter, union


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU with the no-target convention: two empty masks score 1.0."""
    inter, union = intersection_union(a, b)
    if union == 0:
        return 1.0
    return inter / union


def bbox_of(mask: np.ndarray) -> BBox:
    m = as_mask(mask)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise EmptyMask("bounding box of an empty mask is undefined")
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def _overlap_weights(n_pixels: int, n_cells: int) -> np.ndarray:
    # Coordinates scaled by n_cells * n_pixels' denominators so every overlap is
    # an integer: pixel i spans [i*n_cells, (i+1)*n_cells), cell r spans
    # [r*n_pixels, (r+1)*n_pixels).
    px = np.arange(n_pixels, dtype=np.int64)
    cells = np.arange(n_cells, dtype=np.int64)
    lo = np.maximum(px[None, :] * n_cells, cells[:, None] * n_pixels)
    hi = np.minimum((px[None, :] + 1) * n_cells, (cells[:, None] + 1) * n_pixels)
    return np.clip(hi - lo, 0, None)


def downsample_counts(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Covered area per cell scaled by ``grid_h * grid_w`` (exact integers).

    ``counts / (height * width)`` is the fractional coverage of each cell.
    """
    m = as_mask(mask)
    if grid_h < 1 or grid_w < 1:
        raise DimensionMismatch("grid dimensions must be >= 1")
    h, w = m.shape
    wy = _overlap_weights(h, grid_h)
    wx = _overlap_weights(w, grid_w)
    # float64 BLAS products stay exact: every partial sum is an integer far
    # below 2**53 for any realistic image size
    out = wy.astype(float) @ m.astype(float) @ wx.T.astype(float)
    return np.rint(out).astype(np.int64)


def downsample(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Fraction of each grid cell's area covered by ``mask``.

    Cell boundaries may fall between pixels; partial pixels are accounted by
    exact area, so ``coverage.sum() * cell_area == area(mask)``.
    """
    m = as_mask(mask)
    counts = downsample_counts(m, grid_h, grid_w)
    return counts / float(m.shape[0] * m.shape[1])


def center_cell(mask: np.ndarray, grid_h: int, grid_w: int) -> tuple[int, int]:
    """Grid cell containing the mask's bbox center (grid center if empty)."""
    m = as_mask(mask)
    h, w = m.shape
    try:
        cx, cy = bbox_of(m).center
    except EmptyMask:
        cx, cy = w / 2.0, h / 2.0
    row = min(int(cy * grid_h / h), grid_h - 1)
    col = min(int(cx * grid_w / w), grid_w - 1)
    return row, col


def mask_pool(
    values: np.ndarray,
    coverage: np.ndarray,
    fallback_cell: Optional[tuple[int, int]] = None,
) -> np.ndarray:
    """Coverage-weighted mean of a ``(C, gh, gw)`` feature map.

    When the coverage is all zero the features of ``fallback_cell`` (default:
    the grid center) are returned so every mask yields a finite vector.
    """
    values = np.asarray(values, dtype=float)
    coverage = np.asarray(coverage, dtype=float)
    if values.ndim != 3 or values.shape[1:] != coverage.shape:
        raise DimensionMismatch(
            f"feature grid {values.shape[1:]} does not match coverage {coverage.shape}"
        )
    total = coverage.sum()
    if total <= 0:
        gh, gw = coverage.shape
        r, c = fallback_cell if fallback_cell is not None else (gh // 2, gw // 2)
        return values[:, r, c].copy()
    return np.tensordot(values, coverage, axes=([1, 2], [0, 1])) / total


# Perturbations -------------------------------------------------------------


@dataclass(frozen=True)
class Translate:
    dx: int
    dy: int


@dataclass(frozen=True)
class Dilate:
    radius: int


@dataclass(frozen=True)
class Erode:
    radius: int


@dataclass(frozen=True)
class MergeWith:
    other: np.ndarray

    def __hash__(self):
        return hash(self.other.tobytes())


@dataclass(frozen=True)
class SplitHalf:
    """Keep one half of the mask, split at its bbox midline.

    ``axis=0`` splits left/right, ``axis=1`` splits top/bottom. ``keep`` of
    None draws the kept half from the generator.
    """

    axis: int
    keep: Optional[int] = None


PerturbSpec = Union[Translate, Dilate, Erode, MergeWith, SplitHalf]

_CROSS = ndimage.generate_binary_structure(2, 1)


def shift(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate by (dx, dy) pixels; content moved outside the frame is lost."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    if src_x.start < src_x.stop and src_y.start < src_y.stop:
        out[dst_y, dst_x] = mask[src_y, src_x]
    return out


def perturb(mask: np.ndarray, spec: PerturbSpec, rng: np.random.Generator) -> np.ndarray:
    m = as_mask(mask)
    if isinstance(spec, Translate):
        return shift(m, spec.dx, spec.dy)
    if isinstance(spec, Dilate):
        if spec.radius <= 0:
            return m.copy()
        return ndimage.binary_dilation(m, structure=_CROSS, iterations=spec.radius)
    if isinstance(spec, Erode):
        if spec.radius <= 0:
            return m.copy()
        return ndimage.binary_erosion(m, structure=_CROSS, iterations=spec.radius, border_value=0)
    if isinstance(spec, MergeWith):
        other = as_mask(spec.other)
        _check_same_shape(m, other)
        return m | other
    if isinstance(spec, SplitHalf):
        if not m.any():
            return m.copy()
        box = bbox_of(m)
        keep = spec.keep if spec.keep is not None else int(rng.integers(2))
        out = m.copy()
        if spec.axis == 0:
            mid = (box.x_min + box.x_max) // 2
            if keep == 0:
                out[:, mid:] = False
            else:
                out[:, :mid] = False
        else:
            mid = (box.y_min + box.y_max) // 2
            if keep == 0:
                out[mid:, :] = False
            else:
                out[:mid, :] = False
        return out
    raise TypeError(f"unknown perturbation {spec!r}")


def union_of(masks: Sequence[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        out |= m
    return out
