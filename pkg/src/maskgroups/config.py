"""Run configuration: one JSON document, overridable by dotted-name flags."""
from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Optional, Sequence

from .datagen import GenConfig
from .errors import ConfigInvalid
from .model.selector import TrainConfig
from .synth import SceneConfig


def _dataclass_defaults(cls, skip=()) -> dict:
    out = {}
    inst = cls()
    for f in fields(cls):
        if f.name not in skip:
            out[f.name] = copy.deepcopy(getattr(inst, f.name))
    return out


def default_config() -> dict:
    return {
        "seed": 0,
        "threads": 1,
        "paths": {
            "scenes": "scenes.json",
            "dataset": "dataset.jsonl",
            "holdout": None,
            "checkpoint": "model.ckpt",
            "report_dir": "reports",
            "freeform": None,
        },
        "synth": {"n": 100, "prefix": "scene", "start": 0, "png": False, **_dataclass_defaults(SceneConfig)},
        "gen": _dataclass_defaults(GenConfig, skip=("seed",)),
        "train": {**_dataclass_defaults(TrainConfig, skip=("seed",)), "resume": False, "checkpoint_dtype": None},
        "eval": {"oracle": False, "overlays": 0, "min_giou": None, "min_ciou": None, "min_n_acc": None},
        "oracle": {"p_miss_grid": [0.0, 0.25, 0.5, 1.0], "distractor_grid": [0]},
        "ablate": {"arms": ["nonar", "ar"], "latency_samples": 100},
    }


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        where = f"{prefix}{key}"
        if key not in base:
            raise ConfigInvalid(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigInvalid(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def parse_value(text: str) -> Any:
    """JSON literal when it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigInvalid(f"unknown config key {dotted!r}")
        if i == len(parts) - 1:
            if isinstance(node[part], dict):
                raise ConfigInvalid(f"config key {dotted!r} is a section, not a field")
            node[part] = value
        else:
            node = node[part]


def load_config(path: Optional[str] = None, overrides: Sequence[tuple[str, Any]] = ()) -> dict:
    """Defaults, then the JSON file, then overrides (flags always win)."""
    cfg = default_config()
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config file is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigInvalid("config file must hold a JSON object")
        _merge(cfg, doc)
    for key, value in overrides:
        set_dotted(cfg, key, value)
    return cfg


def scene_config(cfg: dict) -> SceneConfig:
    s = {k: v for k, v in cfg["synth"].items() if k not in ("n", "prefix", "start", "png")}
    try:
        return SceneConfig(**s)
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from None


def gen_config(cfg: dict) -> GenConfig:
    try:
        g = GenConfig(seed=int(cfg["seed"]), **cfg["gen"])
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from None
    g.validate()
    return g


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k not in ("resume", "checkpoint_dtype")}
    try:
        tc = TrainConfig(seed=int(cfg["seed"]), **t)
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from None
    tc.validate()
    return tc


def dumps_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
