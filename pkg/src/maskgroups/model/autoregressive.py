"""Autoregressive baseline: emit one continuous mask embedding per step and
match it to the nearest unchosen candidate token.

Training is teacher-forced regression onto the (stop-gradient) mask tokens of
the targets in raster order, followed by the learnable stop embedding.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..metrics import GroupPrediction, sample_id
from . import layers as L
from .features import candidate_boxes
from .selector import ModelParams, build_sequence, collate, encode, encode_backward, gather_queries, project, scatter_queries


def raster_order(targets, boxes) -> list[int]:
    """Targets sorted by bbox top-left corner (row first), then index."""
    def key(i):
        b = boxes[i]
        return (b.y_min, b.x_min, i) if b is not None else (0, 0, i)

    return sorted(targets, key=key)


def _cosine(e: np.ndarray, rows: np.ndarray) -> np.ndarray:
    en = np.linalg.norm(e) + 1e-12
    rn = np.linalg.norm(rows, axis=-1) + 1e-12
    return rows @ e / (rn * en)


def match_emission(e: np.ndarray, tokens: np.ndarray, chosen: Sequence[int], stop: np.ndarray) -> Optional[int]:
    """Unchosen candidate most similar to ``e``, or None when the stop
    embedding is at least as similar as every remaining candidate."""
    remaining = [j for j in range(tokens.shape[0]) if j not in set(chosen)]
    if not remaining:
        return None
    sims = _cosine(e, tokens[remaining])
    stop_sim = float(_cosine(e, stop[None])[0])
    best = int(np.argmax(sims))
    if stop_sim >= sims[best]:
        return None
    return remaining[best]


def decode(emit: Callable[[list], np.ndarray], tokens: np.ndarray, stop: np.ndarray, max_steps: int) -> list[int]:
    """Run the matching loop; ``emit(chosen)`` returns the next embedding."""
    chosen: list[int] = []
    for _ in range(max_steps):
        j = match_emission(emit(chosen), tokens, chosen, stop)
        if j is None:
            break
        chosen.append(j)
    return chosen


def _ar_layout(sample, params: ModelParams, prefix: Sequence[int], zero_ref: bool = False):
    lay = build_sequence(sample, params.vocab, params.cfg, zero_ref=zero_ref, with_queries=False)
    emit = [len(lay) - 1]
    for j in prefix:
        lay.roles.append(f"emitted({j})")
        lay.sources.append(("cand", j))
        emit.append(len(lay) - 1)
    lay.query_positions = emit
    return lay


def _ar_forward(params: ModelParams, layouts, feats):
    p = params.tensors
    offsets = np.cumsum([0] + [f.shape[0] for f in feats[:-1]]).tolist()
    batch = collate(layouts, offsets, len(params.vocab), params.cfg.max_seq_len, isolate_queries=False)
    stacked = np.concatenate(feats, axis=0)
    h, c_enc = encode(params, stacked, batch)
    he = gather_queries(h, batch.qpos)
    e, c_head = L.mlp2_forward(he, p["ar.1.w"], p["ar.1.b"], p["ar.2.w"], p["ar.2.b"])
    return e, (c_enc, c_head, h.shape, batch, stacked)


def ar_loss_and_grads(params: ModelParams, samples: Sequence, feats: Sequence[np.ndarray], bank=None, target_params: Optional[ModelParams] = None):
    """Mean squared error of every emission against its target embedding.

    Target mask tokens are treated as constants. They are computed with
    ``target_params`` when given (a frozen copy makes the loss a fixed function
    for finite-difference checks), else with ``params``.
    """
    p = params.tensors
    orders = []
    for s in samples:
        boxes = bank.boxes(s) if bank is not None else candidate_boxes(s)
        orders.append(raster_order(s.targets, boxes))
    layouts = [_ar_layout(s, params, o) for s, o in zip(samples, orders)]
    e, (c_enc, c_head, hshape, batch, stacked) = _ar_forward(params, layouts, feats)
    tokens, _ = project(target_params or params, stacked)  # no gradient
    B, N, d = e.shape
    offsets = np.cumsum([0] + [f.shape[0] for f in feats[:-1]])
    target = np.zeros_like(e)
    is_stop = np.zeros((B, N), dtype=bool)
    for b, o in enumerate(orders):
        for k, j in enumerate(o):
            target[b, k] = tokens[offsets[b] + j]
        target[b, len(o)] = p["stop"]
        is_stop[b, len(o)] = True
    valid = batch.qmask
    counts = valid.sum(axis=1, keepdims=True)
    diff = (e - target) * valid[..., None]
    per_sample = (diff ** 2).sum(axis=(1, 2)) / (counts[:, 0] * d)
    value = float(per_sample.mean())
    de = (2.0 * diff / (counts[..., None] * d * B)).astype(e.dtype)
    dhe, (g1w, g1b, g2w, g2b) = L.mlp2_backward(de, c_head, p["ar.1.w"], p["ar.2.w"])
    dh = scatter_queries(dhe, batch.qpos, hshape)
    grads = encode_backward(params, dh, c_enc)
    grads.update({"ar.1.w": g1w, "ar.1.b": g1b, "ar.2.w": g2w, "ar.2.b": g2b})
    grads["stop"] = -(de * is_stop[..., None]).sum(axis=(0, 1))
    return value, grads


def predict_ar(sample, params: ModelParams, bank, sid: str = "", counter: Optional[list] = None, zero_ref: bool = False) -> GroupPrediction:
    """Sequential decoding, one forward pass per emitted embedding."""
    p = params.tensors
    feats = bank.sample_features(sample)
    tokens, _ = project(params, feats)

    def emit(chosen):
        if counter is not None:
            counter[0] += 1
        e, _ = _ar_forward(params, [_ar_layout(sample, params, chosen, zero_ref)], [feats])
        return e[0, len(chosen)]

    chosen = decode(emit, tokens, p["stop"], params.cfg.max_candidates)
    return GroupPrediction(sid or sample_id(sample, 0), chosen)


def predict_ar_dataset(params: ModelParams, samples: Sequence, bank, batch_size: int = 64, zero_ref: bool = False) -> list[GroupPrediction]:
    """Batched sequential decoding; identical results to :func:`predict_ar`."""
    p = params.tensors
    preds = []
    for i in range(0, len(samples), batch_size):
        chunk = list(samples[i : i + batch_size])
        feats = [bank.sample_features(s) for s in chunk]
        tokens = [project(params, f)[0] for f in feats]
        chosen = [[] for _ in chunk]
        active = list(range(len(chunk)))
        for _ in range(params.cfg.max_candidates):
            if not active:
                break
            layouts = [_ar_layout(chunk[b], params, chosen[b], zero_ref) for b in active]
            e, _ = _ar_forward(params, layouts, [feats[b] for b in active])
            still = []
            for row, b in enumerate(active):
                j = match_emission(e[row, len(chosen[b])], tokens[b], chosen[b], p["stop"])
                if j is not None:
                    chosen[b].append(j)
                    still.append(b)
            active = still
        preds.extend(GroupPrediction(sample_id(s, i + k), c) for k, (s, c) in enumerate(zip(chunk, chosen)))
    return preds
