"""Train a small selector on a small toy corpus and inspect a few predictions."""
import time

from maskgroups.experiments import evaluate_params, predict_any, toy_corpus
from maskgroups.model.selector import TrainConfig
from maskgroups.model.train import train

corpus = toy_corpus(n_train=200, n_holdout=30, seed=2)
print(f"{len(corpus.train)} training samples, {len(corpus.holdout)} held out")

cfg = TrainConfig(d=32, layers=2, base_lr=3e-3, epochs=20, provenance_cap=400)
start = time.perf_counter()
result = train(corpus.train, cfg, corpus.bank, holdout=corpus.holdout,
               on_epoch=lambda row: print(f"epoch {row['epoch']:2d}  loss {row['loss']:.4f}  held-out gIoU {row['holdout_giou']:.4f}"))
print(f"trained in {time.perf_counter() - start:.1f}s")

report = evaluate_params(result.params, corpus.holdout, corpus.bank)
print(f"gIoU {report.giou:.4f}  cIoU {report.ciou:.4f}  N-acc {report.n_acc}")

preds = predict_any(result.params, corpus.holdout[:10], corpus.bank)
for s, p in zip(corpus.holdout[:10], preds):
    mark = "ok " if set(p.selected) == set(s.targets) else "   "
    print(f"{mark}{s.prompt!r}: predicted {sorted(p.selected)}, target {sorted(s.targets)}")
