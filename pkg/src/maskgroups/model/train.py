"""Training, prediction and gradient checking for the non-autoregressive
selector."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from ..errors import ConfigInvalid
from ..metrics import GroupPrediction, evaluate, sample_id
from .selector import (
    Batch,
    ModelParams,
    TrainConfig,
    Vocab,
    backward_logits,
    batch_loss,
    build_sequence,
    collate,
    forward_logits,
    feature_stats,
    init_params,
    sigmoid,
)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    total_steps: int = 0


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero."""
    if total_steps <= 0:
        return cfg.base_lr
    warmup = max(1, math.ceil(cfg.warmup_frac * total_steps)) if cfg.warmup_frac > 0 else 0
    if step < warmup:
        return cfg.base_lr * (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total_steps - warmup))
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adam_step(params: ModelParams, grads: dict, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params.tensors[name]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# Batching ----------------------------------------------------------------


def labels_of(sample) -> np.ndarray:
    y = np.zeros(len(sample.candidates))
    y[list(sample.targets)] = 1.0
    return y


def make_batch(params: ModelParams, samples: Sequence, feats: Sequence[np.ndarray], zero_ref: bool = False):
    """Packed batch, stacked candidate features and padded labels."""
    layouts = [build_sequence(s, params.vocab, params.cfg, zero_ref=zero_ref) for s in samples]
    offsets = np.cumsum([0] + [f.shape[0] for f in feats[:-1]]).tolist()
    batch = collate(layouts, offsets, len(params.vocab), params.cfg.max_seq_len)
    stacked = np.concatenate(feats, axis=0) if feats else np.zeros((0, params.feature_dim))
    labels = np.zeros(batch.qmask.shape)
    for b, s in enumerate(samples):
        labels[b, : len(s.candidates)] = labels_of(s)
    return batch, stacked, labels


def loss_and_grads(params: ModelParams, samples: Sequence, feats: Sequence[np.ndarray], zero_ref: bool = False):
    batch, stacked, labels = make_batch(params, samples, feats, zero_ref)
    z, cache = forward_logits(params, stacked, batch)
    value, dz = batch_loss(z, labels, batch.qmask, params.cfg.pos_weight, params.cfg.loss_norm)
    grads = backward_logits(params, dz, cache)
    return value, grads, z, batch


def predict_logits(params: ModelParams, samples: Sequence, bank, batch_size: int = 64, zero_ref: bool = False) -> list[np.ndarray]:
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        feats = [bank.sample_features(s) for s in chunk]
        batch, stacked, _ = make_batch(params, chunk, feats, zero_ref)
        z, _ = forward_logits(params, stacked, batch)
        for b, s in enumerate(chunk):
            out.append(z[b, : len(s.candidates)].copy())
    return out


def select(logits: np.ndarray, threshold: float) -> frozenset:
    """Candidates whose selection probability strictly exceeds the threshold."""
    probs = sigmoid(np.asarray(logits, dtype=float))
    return frozenset(int(i) for i in np.flatnonzero(probs > threshold))


def predict_group(sample, params: ModelParams, bank, cfg: Optional[TrainConfig] = None, sid: str = "") -> GroupPrediction:
    cfg = cfg or params.cfg
    (z,) = predict_logits(params, [sample], bank)
    return GroupPrediction(sid or sample_id(sample, 0), select(z, cfg.threshold))


def predict_dataset(params: ModelParams, samples: Sequence, bank, zero_ref: bool = False) -> list[GroupPrediction]:
    logits = predict_logits(params, samples, bank, zero_ref=zero_ref)
    return [GroupPrediction(sample_id(s, k), select(z, params.cfg.threshold)) for k, (s, z) in enumerate(zip(samples, logits))]


def mask_accuracy(params: ModelParams, samples: Sequence, bank) -> float:
    logits = predict_logits(params, samples, bank)
    correct = total = 0
    for s, z in zip(samples, logits):
        pred = sigmoid(z) > params.cfg.threshold
        correct += int((pred == (labels_of(s) > 0.5)).sum())
        total += len(z)
    return correct / total if total else 0.0


def evaluate_model(params: ModelParams, samples: Sequence, bank, zero_ref: bool = False):
    return evaluate(predict_dataset(params, samples, bank, zero_ref), samples)


# Training ----------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    log: list  # dicts: epoch, loss, mask_acc, holdout_giou


def build_vocab(*datasets) -> Vocab:
    return Vocab.from_prompts(s.prompt for ds in datasets for s in ds)


def train(
    dataset: Sequence,
    cfg: TrainConfig,
    bank,
    holdout: Optional[Sequence] = None,
    params: Optional[ModelParams] = None,
    state: Optional[OptimizerState] = None,
    vocab: Optional[Vocab] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Seeded minibatch Adam on the weighted BCE objective.

    Passing ``params`` and ``state`` resumes: the schedule continues from
    ``state.step`` within ``state.total_steps``.
    """
    cfg.validate()
    if not dataset:
        raise ConfigInvalid("training needs a non-empty dataset")
    for s in dataset:
        if len(s.candidates) > cfg.max_candidates:
            raise ConfigInvalid(f"sample with {len(s.candidates)} candidates exceeds max_candidates")
    from .autoregressive import ar_loss_and_grads

    feats = [bank.sample_features(s) for s in dataset]
    if params is None:
        vocab = vocab or build_vocab(dataset)
        params = init_params(cfg, vocab, feats[0].shape[1], np.random.default_rng(cfg.seed), feature_stats(feats))
    else:
        params.cfg = cfg
    steps_per_epoch = math.ceil(epoch_size(dataset, cfg) / cfg.batch_size)
    if state is None:
        state = OptimizerState(total_steps=steps_per_epoch * cfg.epochs)
    first_epoch = state.step // steps_per_epoch if steps_per_epoch else 0
    if cfg.decoder == "ar":
        step_fn = lambda p, s, f: ar_loss_and_grads(p, s, f, bank)  # noqa: E731
    else:
        step_fn = loss_and_grads
    log = []
    with threadpool_limits(limits=1):
        for epoch in range(first_epoch, first_epoch + cfg.epochs):
            if state.total_steps and state.step >= state.total_steps:
                break
            order = epoch_order(dataset, cfg, epoch)
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                chosen = order[i : i + cfg.batch_size]
                value, grads = step_fn(params, [dataset[k] for k in chosen], [feats[k] for k in chosen])[:2]
                adam_step(params, grads, state, lr_at(state.step, state.total_steps, cfg), cfg)
                losses.append(value)
            row = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
            row.update(_epoch_metrics(params, holdout if holdout else dataset, bank))
            log.append(row)
            if on_epoch:
                on_epoch(row)
    return TrainResult(params, state, log)


def _provenance_groups(dataset: Sequence) -> dict:
    groups: dict = {}
    for k, s in enumerate(dataset):
        groups.setdefault(s.provenance, []).append(k)
    return groups


def epoch_size(dataset: Sequence, cfg: TrainConfig) -> int:
    if not cfg.provenance_cap:
        return len(dataset)
    return sum(min(len(g), cfg.provenance_cap) for g in _provenance_groups(dataset).values())


def epoch_order(dataset: Sequence, cfg: TrainConfig, epoch: int) -> np.ndarray:
    """Sample indices visited in one epoch.

    With ``provenance_cap`` set, a provenance with more samples than the cap
    contributes a fresh random subset of that size each epoch.
    """
    rng = np.random.default_rng([cfg.seed, epoch])
    if not cfg.provenance_cap:
        return rng.permutation(len(dataset))
    picked = []
    for _, idx in sorted(_provenance_groups(dataset).items()):
        if len(idx) > cfg.provenance_cap:
            idx = sorted(rng.choice(idx, size=cfg.provenance_cap, replace=False))
        picked.extend(idx)
    return rng.permutation(np.array(picked, dtype=np.int64))


def _epoch_metrics(params: ModelParams, samples: Sequence, bank) -> dict:
    if params.cfg.decoder == "ar":
        from .autoregressive import predict_ar_dataset

        report = evaluate(predict_ar_dataset(params, samples, bank), samples)
        return {"mask_acc": float("nan"), "holdout_giou": report.giou}
    logits = predict_logits(params, samples, bank)
    correct = total = 0
    preds = []
    for k, (s, z) in enumerate(zip(samples, logits)):
        sel = sigmoid(z) > params.cfg.threshold
        correct += int((sel == (labels_of(s) > 0.5)).sum())
        total += len(z)
        preds.append(GroupPrediction(sample_id(s, k), np.flatnonzero(sel)))
    return {"mask_acc": correct / total if total else 0.0, "holdout_giou": evaluate(preds, samples).giou}


def dumps_log(log: Sequence[dict]) -> str:
    lines = ["epoch,loss,mask_acc,holdout_giou"]
    for r in log:
        lines.append(f"{r['epoch']},{r['loss']!r},{r['mask_acc']!r},{r['holdout_giou']!r}")
    return "\n".join(lines) + "\n"


# Gradient check ----------------------------------------------------------


def grad_check(
    params: ModelParams,
    samples,
    bank,
    eps: float = 1e-4,
    n_coords: int = 200,
    seed: int = 0,
    loss_fn: Optional[Callable] = None,
    skip_below: float = 1e-10,
    stencil: int = 5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are drawn uniformly from all parameter entries that affect the
    loss; pairs with ``|analytic| + |numeric| < skip_below`` are skipped. The error
    of one coordinate is ``|a - n| / max(|a|, |n|)``. ``stencil=5`` uses the
    fourth-order central difference (Richardson extrapolation of the 3-point
    rule at ``eps`` and ``2 eps``); ``stencil=3`` the plain 3-point rule.
    """
    if stencil not in (3, 5):
        raise ConfigInvalid("stencil must be 3 or 5")
    if not isinstance(samples, (list, tuple)):
        samples = [samples]
    feats = [bank.sample_features(s) for s in samples]
    fn = loss_fn or loss_and_grads
    _, grads = fn(params, samples, feats)[:2]
    names = [n for n in params.names() if n in grads]
    sizes = np.array([params.tensors[n].size for n in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)

    def at(tensor, offset, value):
        tensor[offset] = value
        return fn(params, samples, feats)[0]

    worst = 0.0
    for f in np.sort(flat):
        k = int(np.searchsorted(bounds, f, side="right"))
        offset = int(f - (bounds[k - 1] if k else 0))
        tensor = params.tensors[names[k]].reshape(-1)
        orig = tensor[offset]
        d1 = at(tensor, offset, orig + eps) - at(tensor, offset, orig - eps)
        if stencil == 5:
            d2 = at(tensor, offset, orig + 2 * eps) - at(tensor, offset, orig - 2 * eps)
            numeric = (8 * d1 - d2) / (12 * eps)
        else:
            numeric = d1 / (2 * eps)
        tensor[offset] = orig
        analytic = grads[names[k]].reshape(-1)[offset]
        if abs(analytic) + abs(numeric) < skip_below:
            continue
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return worst
