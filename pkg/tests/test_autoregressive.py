from itertools import chain, combinations

import numpy as np
import pytest

from maskgroups.experiments import latency_bench
from maskgroups.masks import BBox
from maskgroups.model.autoregressive import (
    ar_loss_and_grads,
    decode,
    match_emission,
    predict_ar,
    predict_ar_dataset,
    raster_order,
)
from maskgroups.model.selector import TrainConfig, init_params
from maskgroups.model.train import build_vocab, grad_check, select
from maskgroups.synth import FEATURE_DIM


def subsets(n):
    return chain.from_iterable(combinations(range(n), k) for k in range(n + 1))


def test_raster_order_by_top_left():
    boxes = [BBox(50, 10, 60, 20), BBox(5, 10, 9, 20), BBox(0, 0, 3, 3)]
    assert raster_order([0, 1, 2], boxes) == [2, 1, 0]


def test_empty_target_stops_immediately():
    tokens = np.eye(3)
    stop = np.array([1.0, 1.0, 1.0])
    assert match_emission(stop, tokens, [], stop) is None
    assert decode(lambda chosen: stop, tokens, stop, 10) == []


def test_isolated_token_gives_singleton():
    tokens = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0]])
    stop = np.array([0, 0, 0, 1.0])
    script = [tokens[2], stop]
    out = decode(lambda chosen: script[len(chosen)], tokens, stop, 10)
    assert out == [2]


def test_decoding_never_repeats():
    rng = np.random.default_rng(0)
    tokens = rng.normal(size=(6, 8))
    stop = -np.ones(8) * 100  # practically never the nearest
    same = tokens[1]
    out = decode(lambda chosen: same, tokens, stop, 20)
    assert len(out) == len(set(out))
    assert out[0] == 1


@pytest.mark.parametrize("n", [1, 2, 3])
def test_both_decoders_reach_every_subset(n):
    rng = np.random.default_rng(n)
    tokens = rng.normal(size=(n, 6))
    stop = rng.normal(size=6)
    reached_ar, reached_nonar = set(), set()
    for target in subsets(n):
        script = [tokens[j] for j in target] + [stop]
        reached_ar.add(frozenset(decode(lambda chosen: script[len(chosen)], tokens, stop, n)))
        z = np.where(np.isin(np.arange(n), target), 4.0, -4.0)
        reached_nonar.add(select(z, 0.5))
    everything = {frozenset(s) for s in subsets(n)}
    assert reached_ar == everything and reached_nonar == everything


def test_ar_grad_check_with_frozen_targets(tiny_corpus):
    cfg = TrainConfig(d=16, layers=2, decoder="ar", dtype="float64")
    params = init_params(cfg, build_vocab(tiny_corpus.train), FEATURE_DIM)
    frozen = params.copy()
    bank = tiny_corpus.bank
    samples = [s for s in tiny_corpus.train if len(s.targets) >= 2][:2] + [s for s in tiny_corpus.train if not s.targets][:1]
    err = grad_check(
        params,
        samples,
        bank,
        n_coords=200,
        loss_fn=lambda p, s, f: ar_loss_and_grads(p, s, f, bank, target_params=frozen),
    )
    assert err < 1e-4


def test_ar_stop_gradient_only_reaches_stop_vector(tiny_corpus):
    cfg = TrainConfig(d=16, layers=1, decoder="ar", dtype="float64")
    params = init_params(cfg, build_vocab(tiny_corpus.train), FEATURE_DIM)
    sample = next(s for s in tiny_corpus.train if not s.targets)
    f = [tiny_corpus.bank.sample_features(sample)]
    _, grads = ar_loss_and_grads(params, [sample], f, tiny_corpus.bank)
    assert np.abs(grads["stop"]).sum() > 0


def test_batched_decoding_matches_single(tiny_corpus):
    cfg = TrainConfig(d=16, layers=1, decoder="ar", dtype="float64", seed=3)
    params = init_params(cfg, build_vocab(tiny_corpus.train), FEATURE_DIM)
    # shrink the stop vector so decoding runs a few steps
    params.tensors["stop"] *= 0.01
    samples = tiny_corpus.holdout[:12]
    batched = predict_ar_dataset(params, samples, tiny_corpus.bank, batch_size=5)
    for k, s in enumerate(samples):
        single = predict_ar(s, params, tiny_corpus.bank, sid=batched[k].sample_id)
        assert single == batched[k]


def test_forward_pass_counts(tiny_corpus):
    bank = tiny_corpus.bank
    vocab = build_vocab(tiny_corpus.train)
    samples = tiny_corpus.holdout[:20]
    nonar = init_params(TrainConfig(d=16, layers=1), vocab, FEATURE_DIM)
    res = latency_bench(nonar, samples, bank, n=20, warmup=1)
    assert res.forward_passes == [1] * 20
    ar = init_params(TrainConfig(d=16, layers=1, decoder="ar", seed=1), vocab, FEATURE_DIM)
    ar.tensors["stop"] *= 0.01
    res = latency_bench(ar, samples, bank, n=20, warmup=1)
    sizes = [len(predict_ar(s, ar, bank).selected) for s in samples]
    assert res.forward_passes == [k + 1 for k in sizes]
    assert any(k > 0 for k in sizes)
