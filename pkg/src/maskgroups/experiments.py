"""The toy corpus and train/evaluate helpers shared by the CLI, the demos and
the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .datagen import GenConfig, build_dataset
from .metrics import EvalReport, evaluate
from .model.autoregressive import predict_ar, predict_ar_dataset
from .model.features import FeatureBank
from .model.selector import FORWARD_PASSES, TrainConfig
from .model.train import predict_dataset, predict_group, train
from .synth import COLORS, SceneConfig, sample_scenes

TOY_RULES = ["category", "attribute", "position_abs", "position_rel", "no_target"]


def toy_gen_config(seed: int = 0, **overrides) -> GenConfig:
    cfg = GenConfig(
        seed=seed,
        rules=list(TOY_RULES),
        attributes=list(COLORS),
        p_miss=0.0,
        distractors_per_scene=4,
    )
    return replace(cfg, **overrides)


def toy_scene_config() -> SceneConfig:
    # shapes never overlap, so every mask keeps its full silhouette
    return SceneConfig(max_pair_iou=0.0)


@dataclass
class ToyCorpus:
    train_scenes: list
    holdout_scenes: list
    train: list
    holdout: list
    bank: FeatureBank


def toy_corpus(n_train: int = 600, n_holdout: int = 100, seed: int = 0, gen: Optional[GenConfig] = None) -> ToyCorpus:
    """Train and held-out scenes come from disjoint scene indices."""
    sc = toy_scene_config()
    tr = [s.annotation for s in sample_scenes(n_train, seed, sc, prefix="train")]
    ho = [s.annotation for s in sample_scenes(n_holdout, seed, sc, prefix="holdout", start=n_train)]
    gen = gen or toy_gen_config(seed)
    universe = sorted({e.category for s in tr + ho for e in s.entities})
    gen = replace(gen, label_universe=universe)
    bank = FeatureBank(tr + ho)
    return ToyCorpus(tr, ho, build_dataset(tr, gen), build_dataset(ho, gen), bank)


def predict_any(params, samples: Sequence, bank, zero_ref: bool = False) -> list:
    """Predictions with whichever decoder the parameters were trained for."""
    if params.cfg.decoder == "ar":
        return predict_ar_dataset(params, samples, bank, zero_ref=zero_ref)
    return predict_dataset(params, samples, bank, zero_ref=zero_ref)


def evaluate_params(params, samples: Sequence, bank, zero_ref: bool = False) -> EvalReport:
    return evaluate(predict_any(params, samples, bank, zero_ref), samples)


def arm_config(arm: str, base: TrainConfig) -> TrainConfig:
    """Training config of one ablation arm: a decoder or a special-token mode."""
    if arm in ("nonar", "ar"):
        return replace(base, decoder=arm)
    return replace(base, special_token_mode=arm)


def run_arm(arm: str, base: TrainConfig, train_set: Sequence, holdout: Sequence, bank):
    cfg = arm_config(arm, base)
    result = train(train_set, cfg, bank, holdout=holdout)
    return result.params, evaluate_params(result.params, holdout, bank)


@dataclass
class LatencyResult:
    mean_seconds: float
    forward_passes: list  # per sample


def latency_bench(params, samples: Sequence, bank, decoder: Optional[str] = None, n: int = 100, warmup: int = 5) -> LatencyResult:
    """Single-threaded wall-clock mean per sample at batch size 1.

    Features are cached beforehand so only the selector is timed. At least
    ``n`` samples are timed, cycling through ``samples`` when it is shorter.
    """
    decoder = decoder or params.cfg.decoder
    if not samples:
        raise ValueError("latency_bench needs samples")
    picked = [samples[i % len(samples)] for i in range(max(n, 1))]
    for s in picked:
        bank.sample_features(s)
    passes = []
    with threadpool_limits(limits=1):
        for s in picked[:warmup]:
            _predict_one(params, s, bank, decoder)
        start = time.perf_counter()
        for s in picked:
            before = FORWARD_PASSES[0]
            _predict_one(params, s, bank, decoder)
            passes.append(FORWARD_PASSES[0] - before)
        elapsed = time.perf_counter() - start
    return LatencyResult(elapsed / len(picked), passes)


def _predict_one(params, sample, bank, decoder: str):
    if decoder == "ar":
        return predict_ar(sample, params, bank)
    return predict_group(sample, params, bank)


def train_corpus(corpus: ToyCorpus, cfg: TrainConfig, on_epoch=None):
    return train(corpus.train, cfg, corpus.bank, holdout=corpus.holdout, on_epoch=on_epoch)
