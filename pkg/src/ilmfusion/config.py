"""Run configuration: nested JSON with dotted-key overrides.

Every section has a fixed set of keys with defaults.  Unknown keys are
rejected so a typo cannot silently fall back to a default.  All seeds used
by the pipeline are derived from the single top-level ``seed``.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from ilmfusion.decoding import FusionConfig
from ilmfusion.models import AsrConfig, LmConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "data": {
        "train_preset": "seame_like",
        "test_preset": "asru_like",
        "n_train": 150,
        "n_valid": 40,
        "n_test": 60,
        "n_char": 12,
        "n_word": 8,
        "noise": 1.0,
        "frames_per_token": 4,
        "d_feat": 16,
        "cluster_mode": "within",
        "spread": 1.0,
        "lm_text": "LM4",
        "n_lm_text": 150,
    },
    "asr": {"d_model": 32, "n_heads": 2, "d_ff": 64, "n_enc": 2, "n_dec": 2, "subsample": 2, "dropout": 0.0},
    "lm": {"d_model": 32, "n_heads": 2, "d_ff": 64, "n_layers": 2, "dropout": 0.1},
    "train": {"epochs": 40, "batch_size": 16, "warmup_steps": 200, "lr_factor": 0.3, "n_average": 5,
              "grad_clip": 5.0, "ctc_weight": 0.3},
    "lm_train": {"epochs": 20, "batch_size": 16, "warmup_steps": 200, "lr_factor": 0.3, "n_average": 5},
    "ilm": {"method": "lscl", "hidden": 32, "epochs": 20, "batch_size": 16, "warmup_steps": 200,
            "lr_factor": 0.3},
    "decode": {"lambda_lm": 0.1, "lambda_ilm": 0.2, "ctc_weight": 0.4, "ilm_target": "attention_only",
               "beam_size": 4, "max_len_ratio": 1.0, "length_penalty": 0.0, "split": "test", "nbest": 1,
               "jobs": 1},
    "sweep": {"grid": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6], "split": "valid"},
    "diag": {"min_rise": 3},
}

SPLITS = ("train", "dev", "valid", "test")


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a section")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(like, (int, float, list)):
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            raise ConfigError(f"cannot parse {text!r}") from None
        if isinstance(like, float) and isinstance(value, int):
            value = float(value)
        return value
    return text


def apply_override(cfg: dict, item: str) -> dict:
    """Apply one ``a.b=value`` override; the value is parsed like the default it replaces."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, text = item.split("=", 1)
    *parents, leaf = key.strip().split(".")
    node, default = cfg, DEFAULTS
    for p in parents:
        if p not in default or not isinstance(default[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node, default = node[p], default[p]
    if leaf not in default or isinstance(default[leaf], dict):
        raise ConfigError(f"unknown config key {key!r}")
    node[leaf] = _coerce(text, default[leaf])
    return cfg


def validate(cfg: dict) -> dict:
    """Type-check by building the dataclasses each section feeds."""
    try:
        AsrConfig(d_feat=cfg["data"]["d_feat"], **cfg["asr"])
        LmConfig(**cfg["lm"])
        fusion_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["ilm"]["method"] not in ("otcl", "lscl"):
        raise ConfigError("ilm.method must be otcl or lscl")
    for section in ("decode", "sweep"):
        if cfg[section]["split"] not in SPLITS:
            raise ConfigError(f"{section}.split must be one of {SPLITS}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg


def load(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = _merge(DEFAULTS, raw)
    for item in overrides:
        apply_override(cfg, item)
    return validate(cfg)


def dump(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def fusion_config(cfg: dict) -> FusionConfig:
    d = cfg["decode"]
    return FusionConfig(**{k: d[k] for k in ("lambda_lm", "lambda_ilm", "ctc_weight", "ilm_target", "beam_size",
                                            "max_len_ratio", "length_penalty")})
