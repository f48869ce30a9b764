"""Command suite: synth, datagen, train, eval, oracle, ablate.

Every command reads one JSON config (``--config``) whose fields can be
overridden with flags of the same dotted name, e.g. ``--train.epochs 5``.
Payload files are deterministic; wall-clock data goes to ``*.meta.json``
sidecars in the report directory.

Exit codes: 0 success, 2 config error, 3 data or I/O error, 4 a requested
metric threshold was not met.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import config as C
from .datagen import build_dataset, provenance_counts, read_dataset, read_freeform, read_scenes, write_dataset, write_scenes
from .errors import ConfigError, DataError, SamplingExhausted
from .metrics import evaluate, oracle_ciou, oracle_sweep
from .synth import render_annotation, render_overlay, sample_scenes

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_THRESHOLD = 0, 2, 3, 4
COMMANDS = ("synth", "datagen", "train", "eval", "oracle", "ablate")


class ThresholdFailure(Exception):
    pass


def _report_dir(cfg: dict) -> Path:
    out = Path(cfg["paths"]["report_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_paths(cfg: dict) -> list:
    p = cfg["paths"]["scenes"]
    return list(p) if isinstance(p, (list, tuple)) else [p]


def _load_scenes(cfg: dict) -> list:
    out = []
    for p in _scene_paths(cfg):
        out.extend(read_scenes(p))
    return out


def _bank(cfg: dict):
    from .model.features import FeatureBank

    return FeatureBank(_load_scenes(cfg))


def _write_text(path: Path, text: str) -> None:
    path.write_bytes(text.encode("utf-8"))


# Commands ----------------------------------------------------------------


def cmd_synth(cfg: dict) -> dict:
    s = cfg["synth"]
    scenes = sample_scenes(int(s["n"]), int(cfg["seed"]), C.scene_config(cfg), prefix=s["prefix"], start=int(s["start"]))
    annotations = [sc.annotation for sc in scenes]
    out = Path(_scene_paths(cfg)[0])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scenes(out, annotations)
    if s["png"]:
        from PIL import Image

        png_dir = _report_dir(cfg) / "png"
        png_dir.mkdir(exist_ok=True)
        for a in annotations:
            Image.fromarray(render_annotation(a)).save(png_dir / f"{a.scene_id}.png")
    return {"scenes": len(annotations), "path": str(out)}


def cmd_datagen(cfg: dict) -> dict:
    gen = C.gen_config(cfg)
    scenes = _load_scenes(cfg)
    freeform = read_freeform(cfg["paths"]["freeform"]) if cfg["paths"]["freeform"] else None
    samples = build_dataset(scenes, gen, freeform)
    out = Path(cfg["paths"]["dataset"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, samples)
    summary = {"total": len(samples), "by_provenance": provenance_counts(samples)}
    _write_text(_report_dir(cfg) / "datagen_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_train(cfg: dict) -> dict:
    from .model.checkpoint import load_checkpoint, save_checkpoint
    from .model.train import dumps_log, train

    tc = C.train_config(cfg)
    dataset = read_dataset(cfg["paths"]["dataset"])
    holdout = read_dataset(cfg["paths"]["holdout"]) if cfg["paths"]["holdout"] else None
    bank = _bank(cfg)
    params = state = None
    ckpt = Path(cfg["paths"]["checkpoint"])
    if cfg["train"]["resume"]:
        params, state = load_checkpoint(ckpt)
        if state is None:
            raise DataError("checkpoint has no optimizer state to resume from")
    result = train(dataset, tc, bank, holdout=holdout, params=params, state=state)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, result.params, result.state, cfg["train"]["checkpoint_dtype"])
    _write_text(_report_dir(cfg) / "train_log.csv", dumps_log(result.log))
    return {"step": result.state.step, "total_steps": result.state.total_steps, "epochs_run": len(result.log)}


def _check_thresholds(cfg: dict, report) -> None:
    e = cfg["eval"]
    failures = []
    for key, value in (("min_giou", report.giou), ("min_ciou", report.ciou), ("min_n_acc", report.n_acc)):
        if e[key] is not None and (value is None or value < e[key]):
            failures.append(f"{key[4:]}={value} < {e[key]}")
    if failures:
        raise ThresholdFailure("; ".join(failures))


def cmd_eval(cfg: dict) -> dict:
    dataset = read_dataset(cfg["paths"]["dataset"])
    out = _report_dir(cfg)
    if cfg["eval"]["oracle"]:
        # Same routine as the oracle sweep, restricted to the dataset's scenes.
        ids = {s.scene_id for s in dataset}
        scenes = [s for s in _load_scenes(cfg) if s.scene_id in ids]
        report = oracle_ciou(scenes, C.gen_config(cfg))
        preds = None
    else:
        from .experiments import predict_any
        from .model.checkpoint import load_checkpoint

        params, _ = load_checkpoint(cfg["paths"]["checkpoint"])
        bank = _bank(cfg)
        preds = predict_any(params, dataset, bank)
        report = evaluate(preds, dataset)
    _write_text(out / "eval.json", report.dumps_json())
    _write_text(out / "eval.csv", report.dumps_csv())
    n_overlays = int(cfg["eval"]["overlays"])
    if n_overlays and preds is not None:
        scenes = {s.scene_id: s for s in _load_scenes(cfg)}
        odir = out / "overlays"
        odir.mkdir(exist_ok=True)
        for k, (p, s) in enumerate(zip(preds[:n_overlays], dataset)):
            masks = s.candidate_masks()
            render_overlay(scenes[s.scene_id], [masks[i] for i in sorted(p.selected)], odir / f"{k:05d}.png")
    _check_thresholds(cfg, report)
    return {"giou": report.giou, "ciou": report.ciou, "n_acc": report.n_acc}


def cmd_oracle(cfg: dict) -> dict:
    scenes = _load_scenes(cfg)
    rows = oracle_sweep(scenes, C.gen_config(cfg), cfg["oracle"]["p_miss_grid"], cfg["oracle"]["distractor_grid"])
    lines = ["p_miss,distractors,oracle_ciou"] + [f"{r['p_miss']!r},{r['distractors']},{r['oracle_ciou']!r}" for r in rows]
    _write_text(_report_dir(cfg) / "oracle.csv", "\n".join(lines) + "\n")
    return {"rows": len(rows)}


def cmd_ablate(cfg: dict) -> dict:
    from .experiments import latency_bench, run_arm

    arms = list(cfg["ablate"]["arms"])
    valid = {"nonar", "ar", "none", "shared", "distinct"}
    if not arms or set(arms) - valid:
        raise C.ConfigInvalid(f"ablation arms must be drawn from {sorted(valid)}")
    tc = C.train_config(cfg)
    dataset = read_dataset(cfg["paths"]["dataset"])
    if not cfg["paths"]["holdout"]:
        raise C.ConfigInvalid("ablate needs paths.holdout")
    holdout = read_dataset(cfg["paths"]["holdout"])
    bank = _bank(cfg)
    lines = ["arm,giou,ciou,n_acc,latency"]
    for arm in arms:
        params, report = run_arm(arm, tc, dataset, holdout, bank)
        lat = latency_bench(params, holdout, bank, n=int(cfg["ablate"]["latency_samples"]))
        lines.append(f"{arm},{report.giou!r},{report.ciou!r},{report.n_acc!r},{lat.mean_seconds!r}")
    # latency is wall-clock and varies run to run; the CSV is the one payload
    # that is intentionally not byte-stable
    _write_text(_report_dir(cfg) / "ablate.csv", "\n".join(lines) + "\n")
    return {"arms": arms}


HANDLERS = {
    "synth": cmd_synth,
    "datagen": cmd_datagen,
    "train": cmd_train,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "ablate": cmd_ablate,
}


# Entry point -------------------------------------------------------------


def _split_overrides(extra: Sequence[str]) -> list[tuple[str, object]]:
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise C.ConfigInvalid(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise C.ConfigInvalid(f"flag {tok!r} needs a value")
            raw = extra[i + 1]
            i += 2
        out.append((key, C.parse_value(raw)))
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maskgroups", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--threads", type=int, help="cap on BLAS/worker threads (default 1)")
    ap.add_argument("--oracle", action="store_true", help="eval: score oracle selection instead of a model")
    ap.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    try:
        overrides = _split_overrides(extra)
        if args.threads is not None:
            overrides.append(("threads", args.threads))
        if args.oracle:
            overrides.append(("eval.oracle", True))
        cfg = C.load_config(args.config, overrides)
        if args.print_config:
            sys.stdout.write(C.dumps_config(cfg))
            return EXIT_OK
        threads = int(cfg["threads"])
        if threads < 1:
            raise C.ConfigInvalid("threads must be >= 1")
        out = _report_dir(cfg)
        _write_text(out / f"{args.command}.config.json", C.dumps_config(cfg))
        started = time.time()
        with threadpool_limits(limits=threads):
            result = HANDLERS[args.command](cfg)
        meta = {"command": args.command, "started": started, "seconds": time.time() - started, "result": result}
        _write_text(out / f"{args.command}.meta.json", json.dumps(meta, indent=2, default=str) + "\n")
        print(json.dumps(result, sort_keys=True, default=str))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ThresholdFailure as exc:
        print(f"threshold not met: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (DataError, SamplingExhausted, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
