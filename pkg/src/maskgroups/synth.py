"""Synthetic shape scenes with exact ground truth, and a fixed toy ensemble of
"visual encoders" producing feature maps at heterogeneous resolutions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .datagen import Entity, SceneAnnotation
from .errors import SamplingExhausted
from .masks import _overlap_weights, bbox_of, iou

KINDS = ("circle", "square", "triangle")
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 180, 70),
    "blue": (40, 80, 230),
    "yellow": (230, 210, 40),
    "cyan": (40, 210, 220),
    "magenta": (210, 50, 200),
}
COLORS = tuple(PALETTE)
BACKGROUND = (20, 20, 20)
SIZE_RADII = {"small": 8, "large": 14}
TOUCH_DISTANCE = 2


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    size_class: str
    center: tuple[int, int]  # (x, y)
    radius: int  # circle radius, square half-side, triangle half-base


@dataclass
class SceneConfig:
    width: int = 128
    height: int = 128
    min_shapes: int = 3
    max_shapes: int = 8
    max_pair_iou: float = 0.2
    # extra guard: every shape keeps this fraction of its area after occlusion
    min_visible: float = 0.5
    max_attempts: int = 1000


@dataclass
class SynthScene:
    scene_id: str
    width: int
    height: int
    shapes: list[ShapeSpec]
    annotation: SceneAnnotation = field(repr=False)


def shape_mask(shape: ShapeSpec, width: int, height: int) -> np.ndarray:
    """Full (pre-occlusion) mask of one shape, sampled at pixel centers."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    cx, cy = shape.center
    r = shape.radius
    if shape.kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if shape.kind == "square":
        return (np.abs(px - cx) <= r) & (np.abs(py - cy) <= r)
    if shape.kind == "triangle":
        # apex up, base of width 2r at cy + r, apex at cy - r
        t = (py - (cy - r)) / (2.0 * r)
        return (t >= 0) & (t <= 1) & (np.abs(px - cx) <= t * r)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def _random_shape(rng: np.random.Generator, cfg: SceneConfig) -> ShapeSpec:
    kind = KINDS[int(rng.integers(len(KINDS)))]
    color = COLORS[int(rng.integers(len(COLORS)))]
    size_class = ("small", "large")[int(rng.integers(2))]
    r = SIZE_RADII[size_class]
    cx = int(rng.integers(r + 1, cfg.width - r))
    cy = int(rng.integers(r + 1, cfg.height - r))
    return ShapeSpec(kind, color, size_class, (cx, cy), r)


def visible_masks(shapes: Sequence[ShapeSpec], width: int, height: int) -> list[np.ndarray]:
    """Per-shape visible regions under painter's order (later shapes on top)."""
    full = [shape_mask(s, width, height) for s in shapes]
    covered = np.zeros((height, width), dtype=bool)
    out = [None] * len(full)
    for i in range(len(full) - 1, -1, -1):
        out[i] = full[i] & ~covered
        covered |= full[i]
    return out


def touching_pairs(masks: Sequence[np.ndarray], distance: int = TOUCH_DISTANCE) -> list[tuple[int, int]]:
    """Index pairs whose masks come within ``distance`` pixels (8-adjacency)."""
    square = ndimage.generate_binary_structure(2, 2)
    grown = [ndimage.binary_dilation(m, structure=square, iterations=distance) if m.any() else m for m in masks]
    pairs = []
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if (grown[i] & masks[j]).any():
                pairs.append((i, j))
    return pairs


def annotate(scene_id: str, shapes: Sequence[ShapeSpec], width: int, height: int) -> SceneAnnotation:
    masks = visible_masks(shapes, width, height)
    entities = []
    for i, (s, m) in enumerate(zip(shapes, masks)):
        entities.append(
            Entity(
                entity_id=i,
                category=s.kind,
                attributes=[s.color, s.size_class],
                bbox=bbox_of(m),
                mask=m,
                relations=[],
            )
        )
    for i, j in touching_pairs(masks):
        entities[i].relations.append(("touching", j))
        entities[j].relations.append(("touching", i))
    for e in entities:
        e.relations.sort(key=lambda r: (r[0], r[1]))
    return SceneAnnotation(scene_id, width, height, entities)


def sample_scene(rng: np.random.Generator, config: Optional[SceneConfig] = None, scene_id: str = "scene-0") -> SynthScene:
    cfg = config or SceneConfig()
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes: list[ShapeSpec] = []
    full: list[np.ndarray] = []
    attempts = 0
    while len(shapes) < n:
        attempts += 1
        if attempts > cfg.max_attempts:
            raise SamplingExhausted(f"could not place {n} shapes in {cfg.max_attempts} attempts")
        cand = _random_shape(rng, cfg)
        m = shape_mask(cand, cfg.width, cfg.height)
        if any(iou(m, f) > cfg.max_pair_iou for f in full):
            continue
        vis = visible_masks(shapes + [cand], cfg.width, cfg.height)
        if any(v.sum() < cfg.min_visible * f.sum() for v, f in zip(vis, full + [m])):
            continue
        shapes.append(cand)
        full.append(m)
    return SynthScene(scene_id, cfg.width, cfg.height, shapes, annotate(scene_id, shapes, cfg.width, cfg.height))


def sample_scenes(n: int, seed: int = 0, config: Optional[SceneConfig] = None, prefix: str = "scene", start: int = 0) -> list[SynthScene]:
    """``n`` scenes, scene ``i`` drawn from its own child seed of ``seed``."""
    out = []
    for i in range(start, start + n):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        out.append(sample_scene(rng, config, f"{prefix}-{i:05d}"))
    return out


def render(scene: SynthScene) -> tuple[np.ndarray, list[np.ndarray]]:
    """RGB ``uint8`` raster and the per-entity visible masks."""
    masks = visible_masks(scene.shapes, scene.width, scene.height)
    image = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    for s, m in zip(scene.shapes, masks):
        image[m] = PALETTE[s.color]
    return image, masks


def render_annotation(scene: SceneAnnotation) -> np.ndarray:
    """Re-create the raster of a synthetic scene from its annotation alone.

    Visible masks are disjoint, so painting each with its palette color is
    exact regardless of order.
    """
    image = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    for e in scene.entities:
        color = next((a for a in e.attributes if a in PALETTE), None)
        if color is not None:
            image[e.mask] = PALETTE[color]
    return image


# Encoder ensemble --------------------------------------------------------


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    grid_h: int
    grid_w: int
    channels: int


ENCODERS = (
    EncoderSpec("mean_rgb", 16, 16, 3),
    EncoderSpec("gradient", 32, 32, 2),
    EncoderSpec("coords", 8, 8, 2),
    EncoderSpec("sincos", 32, 32, 8),
)
FEATURE_DIM = sum(e.channels for e in ENCODERS)


def _cell_mean(x: np.ndarray, gh: int, gw: int) -> np.ndarray:
    """Area-exact mean of ``x`` (H, W, ...) over a gh x gw grid of cells."""
    h, w = x.shape[:2]
    wy = _overlap_weights(h, gh) / h
    wx = _overlap_weights(w, gw) / w
    rows = np.tensordot(wy, x, axes=(1, 0))  # (gh, W, ...)
    return np.moveaxis(np.tensordot(wx, rows, axes=(1, 1)), 0, 1)


def sincos_grid(grid_h: int, grid_w: int, channels: int = 8, base: float = 10000.0) -> np.ndarray:
    """2-D sinusoidal position embedding, shape ``(channels, grid_h, grid_w)``.

    The first half of the channels encodes the column index, the second half
    the row index; within each half, channel ``2k`` is ``sin(pos * f_k)`` and
    ``2k+1`` is ``cos(pos * f_k)`` with ``f_k = base ** (-2k / half)``.
    """
    half = channels // 2
    freqs = base ** (-np.arange(0, half, 2) / half)
    out = np.empty((channels, grid_h, grid_w))
    cols = np.arange(grid_w)[None, :] * np.ones((grid_h, 1))
    rows = np.arange(grid_h)[:, None] * np.ones((1, grid_w))
    for k, f in enumerate(freqs):
        out[2 * k] = np.sin(cols * f)
        out[2 * k + 1] = np.cos(cols * f)
        out[half + 2 * k] = np.sin(rows * f)
        out[half + 2 * k + 1] = np.cos(rows * f)
    return out


def encode_ensemble(image: np.ndarray) -> list[np.ndarray]:
    """Four deterministic feature maps, each ``(channels, grid_h, grid_w)``.

    mean_rgb: per-cell mean color in [0, 1]; gradient: per-cell mean of the
    Sobel gradient magnitude in the L2 and in the L1 norm (their ratio tracks
    edge orientation, which separates curved, axis-aligned and slanted
    outlines; both normalized to [0, 1]); coords: normalized cell-center
    (x, y); sincos: 2-D sinusoidal position embedding.
    """
    img = np.asarray(image, dtype=float) / 255.0
    e_rgb, e_grad, e_xy, e_pos = ENCODERS

    rgb = _cell_mean(img, e_rgb.grid_h, e_rgb.grid_w).transpose(2, 0, 1)

    gx = np.stack([ndimage.sobel(img[..., c], axis=1, mode="nearest") for c in range(3)], -1)
    gy = np.stack([ndimage.sobel(img[..., c], axis=0, mode="nearest") for c in range(3)], -1)
    # per-channel Sobel response is at most 4 in each direction
    mag_l2 = np.sqrt((gx ** 2 + gy ** 2).sum(-1)) / np.sqrt(3 * 32.0)
    mag_l1 = (np.abs(gx) + np.abs(gy)).sum(-1) / 24.0
    grad = np.stack(
        [
            _cell_mean(mag_l2, e_grad.grid_h, e_grad.grid_w),
            _cell_mean(mag_l1, e_grad.grid_h, e_grad.grid_w),
        ]
    )

    gh, gw = e_xy.grid_h, e_xy.grid_w
    xs = (np.arange(gw) + 0.5) / gw
    ys = (np.arange(gh) + 0.5) / gh
    coords = np.stack([np.broadcast_to(xs[None, :], (gh, gw)), np.broadcast_to(ys[:, None], (gh, gw))])

    pos = sincos_grid(e_pos.grid_h, e_pos.grid_w, e_pos.channels)
    return [rgb, grad, coords.astype(float), pos]


# Overlay output ----------------------------------------------------------

OVERLAY_COLORS = (
    (255, 255, 255),
    (255, 140, 0),
    (0, 255, 127),
    (30, 144, 255),
    (255, 20, 147),
    (173, 255, 47),
)


def overlay(image: np.ndarray, masks: Sequence[np.ndarray], alpha: float = 0.5) -> np.ndarray:
    out = np.asarray(image, dtype=float).copy()
    for k, m in enumerate(masks):
        color = np.asarray(OVERLAY_COLORS[k % len(OVERLAY_COLORS)], dtype=float)
        out[m] = (1 - alpha) * out[m] + alpha * color
    return np.round(out).astype(np.uint8)


def render_overlay(scene, masks: Sequence[np.ndarray], path) -> None:
    """Write the scene raster with a tinted overlay per mask as a PNG."""
    from PIL import Image

    if isinstance(scene, SynthScene):
        image, _ = render(scene)
    else:
        image = render_annotation(scene)
    Image.fromarray(overlay(image, masks)).save(path, format="PNG", optimize=False)
