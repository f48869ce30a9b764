from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskgroups.errors import DimensionMismatch, EmptyMask, IllegalZeroRun, SumMismatch
from maskgroups.masks import (
    BBox,
    Dilate,
    Erode,
    MergeWith,
    RleMask,
    SplitHalf,
    Translate,
    area,
    bbox_of,
    center_cell,
    downsample,
    downsample_counts,
    iou,
    mask_pool,
    perturb,
    rle_decode,
    rle_encode,
)

masks = st.integers(1, 12).flatmap(lambda h: st.integers(1, 12).flatmap(lambda w: arrays(bool, (h, w))))


def px(h, w, *cells):
    m = np.zeros((h, w), dtype=bool)
    for r, c in cells:
        m[r, c] = True
    return m


# RLE ---------------------------------------------------------------------


def test_rle_examples():
    assert rle_encode(np.zeros((3, 3), bool)).counts == (9,)
    assert rle_encode(np.ones((2, 3), bool)).counts == (0, 6)
    assert rle_encode(px(2, 2, (0, 0))).counts == (0, 1, 3)


def test_rle_decode_examples():
    assert not rle_decode(RleMask(3, 3, (9,))).any()
    assert rle_decode(RleMask(3, 2, (0, 6))).all()
    np.testing.assert_array_equal(rle_decode(RleMask(2, 2, (0, 1, 3))), px(2, 2, (0, 0)))


def test_rle_is_column_major():
    # pixel (row 0, col 1) is the third pixel in a column-major scan of 2x2
    assert rle_encode(px(2, 2, (0, 1))).counts == (2, 1, 1)


def test_rle_decode_errors():
    with pytest.raises(SumMismatch):
        rle_decode(RleMask(2, 2, (1, 2)))
    with pytest.raises(IllegalZeroRun):
        rle_decode(RleMask(2, 2, (1, 0, 3)))


def test_rle_json_shape():
    assert rle_encode(px(2, 2, (0, 0))).to_json() == {"w": 2, "h": 2, "counts": [0, 1, 3]}
    assert RleMask.from_json({"w": 2, "h": 2, "counts": [0, 1, 3]}) == RleMask(2, 2, (0, 1, 3))


@given(masks)
@settings(max_examples=200, deadline=None)
def test_rle_roundtrip_property(m):
    rle = rle_encode(m)
    assert sum(rle.counts) == m.size
    assert all(c > 0 for c in rle.counts[1:])
    np.testing.assert_array_equal(rle_decode(rle), m)


# IoU / bbox --------------------------------------------------------------


def test_iou_examples():
    a = px(3, 3, (0, 0), (1, 1))
    assert iou(a, a) == 1.0
    assert iou(px(3, 3, (0, 0)), px(3, 3, (2, 2))) == 0.0
    assert iou(a, px(3, 3, (0, 0))) == 0.5


def test_iou_empty_conventions():
    e = np.zeros((2, 2), bool)
    assert iou(e, e) == 1.0
    assert iou(e, px(2, 2, (0, 0))) == 0.0


def test_iou_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        iou(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_iou_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 6, 7)) < 0.4
    assert iou(a, b) == iou(b, a)
    if a.any():
        assert iou(a, a) == 1.0


def test_bbox_examples():
    # pixel (x=2, y=3)
    assert bbox_of(px(5, 5, (3, 2))) == BBox(2, 3, 3, 4)
    assert bbox_of(np.ones((4, 6), bool)) == BBox(0, 0, 6, 4)
    assert bbox_of(px(5, 5, (0, 0), (4, 4))) == BBox(0, 0, 5, 5)
    with pytest.raises(EmptyMask):
        bbox_of(np.zeros((3, 3), bool))


# Downsampling and pooling ------------------------------------------------


def test_downsample_examples():
    m = np.zeros((4, 4), bool)
    m[:2, :2] = True
    np.testing.assert_array_equal(downsample(m, 2, 2), [[1, 0], [0, 0]])
    np.testing.assert_array_equal(downsample(px(4, 4, (0, 0)), 2, 2), [[0.25, 0], [0, 0]])
    np.testing.assert_array_equal(downsample(np.ones((5, 7), bool), 3, 2), np.ones((3, 2)))


def brute_coverage(m, gh, gw):
    """Exact rational coverage by clipping every pixel square against every cell."""
    h, w = m.shape
    out = [[Fraction(0)] * gw for _ in range(gh)]
    for r in range(gh):
        y0, y1 = Fraction(r * h, gh), Fraction((r + 1) * h, gh)
        for c in range(gw):
            x0, x1 = Fraction(c * w, gw), Fraction((c + 1) * w, gw)
            covered = Fraction(0)
            for i in range(h):
                oy = max(Fraction(0), min(y1, i + 1) - max(y0, i))
                if not oy:
                    continue
                for j in range(w):
                    if m[i, j]:
                        covered += oy * max(Fraction(0), min(x1, j + 1) - max(x0, j))
            out[r][c] = covered / ((y1 - y0) * (x1 - x0))
    return out


@given(masks, st.integers(1, 5), st.integers(1, 5))
@settings(max_examples=60, deadline=None)
def test_downsample_matches_rational_oracle(m, gh, gw):
    counts = downsample_counts(m, gh, gw)
    h, w = m.shape
    oracle = brute_coverage(m, gh, gw)
    for r in range(gh):
        for c in range(gw):
            assert Fraction(int(counts[r, c]), h * w) == oracle[r][c]
    # conservation: sum of coverage times cell area equals the mask area
    assert Fraction(int(counts.sum()), gh * gw) == area(m)


def test_mask_pool_examples():
    values = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert mask_pool(values, np.array([[1.0, 0], [0, 0]])).tolist() == [1.0]
    assert mask_pool(values, np.array([[0.5, 0.5], [0, 0]])).tolist() == [1.5]
    assert mask_pool(values, np.zeros((2, 2)), fallback_cell=(1, 1)).tolist() == [4.0]


def test_mask_pool_fallback_uses_bbox_center_cell():
    # a mask in the lower-right quadrant maps to cell (1, 1) of a 2x2 grid
    m = px(8, 8, (6, 6))
    assert center_cell(m, 2, 2) == (1, 1)


def test_mask_pool_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        mask_pool(np.zeros((1, 2, 2)), np.zeros((3, 3)))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_mask_pool_within_channel_range(seed):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(3, 4, 5))
    cov = rng.random((4, 5)) * (rng.random((4, 5)) < 0.5)
    out = mask_pool(values, cov)
    lo, hi = values.reshape(3, -1).min(1), values.reshape(3, -1).max(1)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


# Perturbations -----------------------------------------------------------


def test_perturb_identities():
    rng = np.random.default_rng(0)
    m = np.random.default_rng(1).random((6, 6)) < 0.5
    np.testing.assert_array_equal(perturb(m, Translate(0, 0), rng), m)
    np.testing.assert_array_equal(perturb(m, Dilate(0), rng), m)


def test_dilate_cross():
    out = perturb(px(3, 3, (1, 1)), Dilate(1), np.random.default_rng(0))
    np.testing.assert_array_equal(out, px(3, 3, (0, 1), (1, 0), (1, 1), (1, 2), (2, 1)))


def test_erode_may_empty():
    out = perturb(px(3, 3, (1, 1)), Erode(1), np.random.default_rng(0))
    assert not out.any()


def test_translate_clips():
    out = perturb(px(3, 3, (0, 2)), Translate(1, 0), np.random.default_rng(0))
    assert not out.any()
    out = perturb(px(3, 3, (0, 0)), Translate(1, 2), np.random.default_rng(0))
    np.testing.assert_array_equal(out, px(3, 3, (2, 1)))


def test_merge_and_split():
    a, b = px(4, 4, (0, 0)), px(4, 4, (3, 3))
    np.testing.assert_array_equal(perturb(a, MergeWith(b), np.random.default_rng(0)), a | b)
    full = np.ones((4, 4), bool)
    left = perturb(full, SplitHalf(0, keep=0), np.random.default_rng(0))
    assert left[:, :2].all() and not left[:, 2:].any()


def test_perturb_deterministic_for_seed():
    m = np.random.default_rng(3).random((10, 10)) < 0.5
    a = perturb(m, SplitHalf(1), np.random.default_rng(7))
    b = perturb(m, SplitHalf(1), np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
