"""Mask-centric selector: mask tokens, sequence layout and the transformer.

Sequence layout for one sample::

    prompt words (each <mask-ref> -> [ref_pre] ref_token)
    [pool_pre] cand_0 ... [pool_pre] cand_{n-1}      # context
    cand_0 ... cand_{n-1}                            # query copies

A binary head reads the hidden state at every query copy. Attention is causal,
and a query copy may not look at other query copies, so each candidate is
scored against the full context independently.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..datagen import MASK_REF
from ..errors import ConfigInvalid, SequenceTooLong, TooManyCandidates, VocabMiss
from . import layers as L

SPECIAL_TOKEN_MODES = ("none", "shared", "distinct")
_WORD_RE = re.compile(r"<mask-ref>|[a-z0-9]+(?:-[a-z0-9]+)*|[^\sa-z0-9]")


@dataclass
class TrainConfig:
    d: int = 64
    layers: int = 3
    heads: int = 4
    ffn_mult: int = 4
    pos_weight: float = 5.0
    threshold: float = 0.5
    base_lr: float = 3e-4
    warmup_frac: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    special_token_mode: str = "distinct"
    max_candidates: int = 24
    max_seq_len: int = 128
    # "count": (1/N) sum w_i bce_i; "weight": sum w_i bce_i / sum w_i
    loss_norm: str = "count"
    decoder: str = "nonar"
    # per-epoch ceiling on samples of one provenance, 0 disables
    provenance_cap: int = 0
    init_std: float = 0.02
    # arithmetic precision of parameters and activations
    dtype: str = "float32"

    def validate(self) -> None:
        if self.pos_weight <= 0:
            raise ConfigInvalid("pos_weight must be > 0")
        if not 0 < self.threshold < 1:
            raise ConfigInvalid("threshold must lie in (0, 1)")
        if self.d % self.heads:
            raise ConfigInvalid("d must be divisible by heads")
        if self.special_token_mode not in SPECIAL_TOKEN_MODES:
            raise ConfigInvalid(f"special_token_mode must be one of {SPECIAL_TOKEN_MODES}")
        if self.loss_norm not in ("count", "weight"):
            raise ConfigInvalid("loss_norm must be 'count' or 'weight'")
        if self.decoder not in ("nonar", "ar"):
            raise ConfigInvalid("decoder must be 'nonar' or 'ar'")
        if self.provenance_cap < 0:
            raise ConfigInvalid("provenance_cap must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.layers < 0:
            raise ConfigInvalid("epochs >= 0, batch_size >= 1 and layers >= 0 required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigInvalid("dtype must be 'float32' or 'float64'")
        if self.base_lr < 0 or not 0 <= self.warmup_frac <= 1:
            raise ConfigInvalid("invalid learning-rate schedule")


def split_words(prompt: str) -> list[str]:
    return _WORD_RE.findall(prompt.lower())


class Vocab:
    """Closed word-level vocabulary over template prompts."""

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    @classmethod
    def from_prompts(cls, prompts) -> "Vocab":
        words = set()
        for p in prompts:
            words.update(w for w in split_words(p) if w != MASK_REF)
        return cls(sorted(words))

    def encode(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise VocabMiss(f"word {word!r} is not in the vocabulary") from None


class ModelParams:
    """Named tensors plus the metadata needed to rebuild the model."""

    def __init__(self, tensors: dict, vocab: Vocab, cfg: TrainConfig, feature_dim: int):
        self.tensors = tensors
        self.vocab = vocab
        self.cfg = cfg
        self.feature_dim = feature_dim

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.vocab, self.cfg, self.feature_dim)

    def names(self) -> list[str]:
        return list(self.tensors)


def init_params(
    cfg: TrainConfig,
    vocab: Vocab,
    feature_dim: int,
    rng: Optional[np.random.Generator] = None,
    feature_stats: Optional[tuple] = None,
) -> ModelParams:
    """Random initial parameters.

    ``feature_stats`` is an optional ``(mean, std)`` pair of pooled-feature
    statistics; the projector standardizes its input with these fixed
    (untrained) buffers.
    """
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    d, h = cfg.d, cfg.d * cfg.ffn_mult
    std = cfg.init_std
    t = {}

    def lin(prefix, fan_in, fan_out, scale=1.0):
        t[prefix + "w"] = rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))
        t[prefix + "b"] = np.zeros(fan_out)

    t["word_emb"] = rng.normal(0.0, std, size=(max(len(vocab), 1), d))
    lin("proj.1.", feature_dim, d)
    lin("proj.2.", d, d)
    t["pool_pre"] = rng.normal(0.0, std, size=d)
    t["ref_pre"] = rng.normal(0.0, std, size=d)
    t["pos_emb"] = rng.normal(0.0, std, size=(cfg.max_seq_len, d))
    resid = 1.0 / np.sqrt(2.0 * max(cfg.layers, 1))
    for l in range(cfg.layers):
        p = f"blocks.{l}."
        t[p + "ln1.g"] = np.ones(d)
        t[p + "ln1.b"] = np.zeros(d)
        for name in ("q", "k", "v"):
            t[p + "attn.w" + name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
            t[p + "attn.b" + name] = np.zeros(d)
        t[p + "attn.wo"] = rng.normal(0.0, resid / np.sqrt(d), size=(d, d))
        t[p + "attn.bo"] = np.zeros(d)
        t[p + "ln2.g"] = np.ones(d)
        t[p + "ln2.b"] = np.zeros(d)
        t[p + "ffn.w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h))
        t[p + "ffn.b1"] = np.zeros(h)
        t[p + "ffn.w2"] = rng.normal(0.0, resid / np.sqrt(h), size=(h, d))
        t[p + "ffn.b2"] = np.zeros(d)
    t["ln_f.g"] = np.ones(d)
    t["ln_f.b"] = np.zeros(d)
    lin("head.1.", d, d)
    lin("head.2.", d, 1)
    lin("ar.1.", d, d)
    lin("ar.2.", d, d)
    t["stop"] = rng.normal(0.0, 1.0, size=d)
    mean, std = feature_stats if feature_stats is not None else (np.zeros(feature_dim), np.ones(feature_dim))
    t["feat.mean"] = np.asarray(mean, dtype=float).copy()
    t["feat.std"] = np.asarray(std, dtype=float).copy()
    dt = np.dtype(cfg.dtype)
    return ModelParams({k: v.astype(dt) for k, v in t.items()}, vocab, cfg, feature_dim)


def feature_stats(feats: Sequence[np.ndarray], floor: float = 1e-3) -> tuple:
    """Per-channel mean and (floored) standard deviation of pooled features."""
    x = np.concatenate(list(feats), axis=0)
    return x.mean(axis=0), np.maximum(x.std(axis=0), floor)


def project(params: ModelParams, feats: np.ndarray):
    """Mask projector: pooled ensemble features (M, F) -> mask tokens (M, d)."""
    p = params.tensors
    x = (np.asarray(feats, dtype=p["feat.mean"].dtype) - p["feat.mean"]) / p["feat.std"]
    return L.mlp2_forward(x, p["proj.1.w"], p["proj.1.b"], p["proj.2.w"], p["proj.2.b"])


# Layout ------------------------------------------------------------------


@dataclass
class SequenceLayout:
    roles: list = field(default_factory=list)
    sources: list = field(default_factory=list)  # ("word", id) | ("pool_pre",) | ("ref_pre",) | ("cand", j) | ("zero",)
    query_positions: list = field(default_factory=list)
    n_candidates: int = 0

    def __len__(self):
        return len(self.roles)


def build_sequence(sample, vocab: Vocab, cfg: TrainConfig, zero_ref: bool = False, with_queries: bool = True) -> SequenceLayout:
    n = len(sample.candidates)
    if n > cfg.max_candidates:
        raise TooManyCandidates(f"{n} candidates exceed max_candidates={cfg.max_candidates}")
    mode = cfg.special_token_mode
    pool_src = ("pool_pre",)
    ref_src = ("ref_pre",) if mode == "distinct" else ("pool_pre",)
    lay = SequenceLayout(n_candidates=n)
    refs = iter(sample.ref_indices)
    for w in split_words(sample.prompt):
        if w == MASK_REF:
            j = next(refs)
            if mode != "none":
                lay.roles.append("ref_pre")
                lay.sources.append(ref_src)
            lay.roles.append("ref_token")
            lay.sources.append(("zero",) if zero_ref else ("cand", j))
        else:
            lay.roles.append("prompt_word")
            lay.sources.append(("word", vocab.encode(w)))
    for j in range(n):
        if mode != "none":
            lay.roles.append("pool_pre")
            lay.sources.append(pool_src)
        lay.roles.append(f"cand_context({j})")
        lay.sources.append(("cand", j))
    if with_queries:
        for j in range(n):
            lay.query_positions.append(len(lay.roles))
            lay.roles.append(f"cand_query({j})")
            lay.sources.append(("cand", j))
    return lay


@dataclass
class Batch:
    idx: np.ndarray  # (B, T) rows of the unified input table
    allowed: np.ndarray  # (B, T, T)
    qpos: np.ndarray  # (B, N) query positions (0 where padded)
    qmask: np.ndarray  # (B, N) valid query flags
    lengths: np.ndarray


def collate(
    layouts: Sequence[SequenceLayout],
    token_offsets: Sequence[int],
    vocab_size: int,
    max_seq_len: int,
    isolate_queries: bool = True,
) -> Batch:
    """Pack layouts; candidate j of sample b reads token row token_offsets[b] + j."""
    B = len(layouts)
    T = max(len(l) for l in layouts)
    if T > max_seq_len:
        raise SequenceTooLong(f"sequence of {T} tokens exceeds max_seq_len={max_seq_len}")
    N = max(max((len(l.query_positions) for l in layouts), default=0), 1)
    pool_row, ref_row, zero_row, tok0 = vocab_size, vocab_size + 1, vocab_size + 2, vocab_size + 3
    idx = np.full((B, T), zero_row, dtype=np.int64)
    qpos = np.zeros((B, N), dtype=np.int64)
    qmask = np.zeros((B, N), dtype=bool)
    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = np.broadcast_to(causal, (B, T, T)).copy()
    for b, lay in enumerate(layouts):
        for t, src in enumerate(lay.sources):
            kind = src[0]
            if kind == "word":
                idx[b, t] = src[1]
            elif kind == "pool_pre":
                idx[b, t] = pool_row
            elif kind == "ref_pre":
                idx[b, t] = ref_row
            elif kind == "cand":
                idx[b, t] = tok0 + token_offsets[b] + src[1]
        q = lay.query_positions
        if q:
            qpos[b, : len(q)] = q
            qmask[b, : len(q)] = True
        if q and isolate_queries:
            q0, q1 = q[0], q[-1] + 1
            allowed[b, q0:q1, q0:q1] = np.eye(q1 - q0, dtype=bool)
    lengths = np.array([len(l) for l in layouts])
    return Batch(idx, allowed, qpos, qmask, lengths)


# Forward / backward ------------------------------------------------------


# Incremented once per encoder call; the latency benchmark reads it.
FORWARD_PASSES = [0]


def encode(params: ModelParams, feats: np.ndarray, batch: Batch):
    """Final hidden states (B, T, d) for a packed batch."""
    FORWARD_PASSES[0] += 1
    p = params.tensors
    cfg = params.cfg
    tokens, c_proj = project(params, feats)
    d = cfg.d
    table = np.concatenate([p["word_emb"][: len(params.vocab)], p["pool_pre"][None], p["ref_pre"][None], np.zeros((1, d), dtype=tokens.dtype), tokens])
    T = batch.idx.shape[1]
    x = table[batch.idx] + p["pos_emb"][:T]
    block_caches = []
    for l in range(cfg.layers):
        x, c = L.block_forward(x, p, f"blocks.{l}.", cfg.heads, batch.allowed)
        block_caches.append(c)
    h, c_lnf = L.layernorm_forward(x, p["ln_f.g"], p["ln_f.b"])
    return h, (c_proj, table.shape[0], block_caches, c_lnf, batch, feats.shape[0])


def encode_backward(params: ModelParams, dh: np.ndarray, cache) -> dict:
    p = params.tensors
    cfg = params.cfg
    c_proj, n_rows, block_caches, c_lnf, batch, n_tokens = cache
    g = {}
    dx, g["ln_f.g"], g["ln_f.b"] = L.layernorm_backward(dh, c_lnf, p["ln_f.g"])
    for l in range(cfg.layers - 1, -1, -1):
        dx, gb = L.block_backward(dx, block_caches[l], p, f"blocks.{l}.", cfg.heads)
        g.update(gb)
    T = dx.shape[1]
    dpos = np.zeros_like(p["pos_emb"])
    dpos[:T] = dx.sum(axis=0)
    g["pos_emb"] = dpos
    dtable = np.zeros((n_rows, cfg.d), dtype=dx.dtype)
    np.add.at(dtable, batch.idx.ravel(), dx.reshape(-1, cfg.d))
    V = len(params.vocab)
    dword = np.zeros_like(p["word_emb"])
    dword[:V] = dtable[:V]
    g["word_emb"] = dword
    g["pool_pre"] = dtable[V]
    g["ref_pre"] = dtable[V + 1]
    dtokens = dtable[V + 3 :]
    _, (g["proj.1.w"], g["proj.1.b"], g["proj.2.w"], g["proj.2.b"]) = L.mlp2_backward(dtokens, c_proj, p["proj.1.w"], p["proj.2.w"])
    return g


def gather_queries(h: np.ndarray, qpos: np.ndarray) -> np.ndarray:
    return np.take_along_axis(h, qpos[..., None], axis=1)


def scatter_queries(dq: np.ndarray, qpos: np.ndarray, shape) -> np.ndarray:
    dh = np.zeros(shape, dtype=dq.dtype)
    rows = np.broadcast_to(np.arange(qpos.shape[0])[:, None], qpos.shape)
    np.add.at(dh, (rows, qpos), dq)
    return dh


def forward_logits(params: ModelParams, feats: np.ndarray, batch: Batch):
    """Per-candidate logits (B, N); padded entries are meaningless."""
    p = params.tensors
    h, c_enc = encode(params, feats, batch)
    hq = gather_queries(h, batch.qpos)
    z, c_head = L.mlp2_forward(hq, p["head.1.w"], p["head.1.b"], p["head.2.w"], p["head.2.b"])
    return z[..., 0], (c_enc, c_head, h.shape)


def backward_logits(params: ModelParams, dz: np.ndarray, cache) -> dict:
    p = params.tensors
    c_enc, c_head, hshape = cache
    dhq, (g1w, g1b, g2w, g2b) = L.mlp2_backward(dz[..., None], c_head, p["head.1.w"], p["head.2.w"])
    dh = scatter_queries(dhq, c_enc[4].qpos, hshape)
    g = encode_backward(params, dh, c_enc)
    g.update({"head.1.w": g1w, "head.1.b": g1b, "head.2.w": g2w, "head.2.b": g2b})
    return g


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def weighted_bce(logits, labels, pos_weight: float, norm: str = "count"):
    """Weighted binary cross-entropy of one sample and its logit gradient.

    ``norm="count"`` averages over all candidates, ``"weight"`` divides by the
    summed weights instead.
    """
    from ..errors import EmptyBatch

    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    if z.size == 0 or z.shape != y.shape:
        raise EmptyBatch("loss needs one label per logit and at least one candidate")
    w = np.where(y > 0.5, pos_weight, 1.0)
    bce = np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))
    denom = z.size if norm == "count" else w.sum()
    value = float((w * bce).sum() / denom)
    grad = w * (sigmoid(z) - y) / denom
    return value, grad


def batch_loss(logits, labels, qmask, pos_weight: float, norm: str = "count"):
    """Mean over samples of the per-sample weighted BCE."""
    B = logits.shape[0]
    total = 0.0
    dz = np.zeros_like(logits)
    for b in range(B):
        m = qmask[b]
        v, g = weighted_bce(logits[b, m], labels[b, m], pos_weight, norm)
        total += v
        dz[b, m] = g / B
    return total / B, dz


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
