"""Run configuration: defaults, preset overlays, JSON file, ``IBPD_`` env vars, CLI overrides.

Later sources win: defaults < preset < config file < environment < command line.
Keys are dotted paths into a nested dict (``train.epochs``); environment
variables spell them ``IBPD_TRAIN__EPOCHS``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

from .datasets import SynthEcgConfig
from .model import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "IBPD_"
PRESETS = ("synth-ecg", "colored-digits")


class ConfigError(ValueError):
    pass


def _without(d: dict, *keys) -> dict:
    return {k: v for k, v in d.items() if k not in keys}


def default_config() -> dict:
    model = _without(asdict(ModelConfig(input_dim=1)), "input_dim", "init_seed")
    for key in ("conf_hidden", "task_hidden", "dec_hidden"):
        model[key] = list(model[key])
    return {
        "preset": "synth-ecg",
        "seed": 0,
        "out_dir": "ibpd-out",
        "data_dir": None,
        "checkpoint": None,
        "ecg": _without(asdict(SynthEcgConfig()), "seed"),
        "digits": {"white_prob": 0.25, "n_images": 6000, "mnist_dir": None},
        "split": {"fractions": [0.6, 0.2, 0.2]},
        "model": model,
        "train": _without(asdict(TrainConfig()), "seed"),
        "analysis": {
            "seed": 0,
            "split": "test",
            "probe_test_fraction": 0.5,
            "probe_l2": 1e-3,
            "probe_nonlinear": False,
            "gap_threshold": 0.9,
            "units": "trigger",
            "grid": "10x4",
            "n_examples": 100,
        },
    }


PRESET_OVERLAYS = {
    "synth-ecg": {"model": {"task_hidden": [256, 16]}},
    "colored-digits": {"model": {"likelihood": "bernoulli", "alpha": 30.0, "task_hidden": [256, 16]}},
}


def _get(cfg: dict, path: list[str]):
    node = cfg
    for part in path:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {'.'.join(path)!r}")
        node = node[part]
    return node


def _coerce(value, default, key: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(default, list) and isinstance(value, list):
        return value
    if isinstance(default, str):
        return value if isinstance(value, str) else json.dumps(value)
    if isinstance(default, dict) and isinstance(value, dict):
        return value
    if type(value) is type(default):
        return value
    raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")


def set_key(cfg: dict, key: str, value) -> None:
    path = key.replace("-", "_").split(".")
    parent = _get(cfg, path[:-1]) if len(path) > 1 else cfg
    if not isinstance(parent, dict) or path[-1] not in parent:
        raise ConfigError(f"unknown config key {key!r}")
    current = parent[path[-1]]
    if isinstance(current, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{key} is a section; give a JSON object")
        for k, v in value.items():
            set_key(cfg, f"{'.'.join(path)}.{k}", v)
        return
    parent[path[-1]] = _coerce(value, current, key)


def parse_value(text: str):
    """JSON literal when it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except (json.JSONDecodeError, ValueError):
        return text


def merge(cfg: dict, overrides: dict, prefix: str = "") -> None:
    for k, v in overrides.items():
        set_key(cfg, f"{prefix}{k}", v)


def env_overrides(environ=None) -> dict[str, object]:
    environ = os.environ if environ is None else environ
    out = {}
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX) :].lower().replace("__", ".")
            out[key] = parse_value(environ[name])
    return out


def resolve(config_file=None, cli: dict | None = None, environ=None, preset: str | None = None) -> dict:
    """Build the fully resolved config.

    The preset is looked up first (CLI, then environment, then file) because
    its overlay sits underneath every other source.
    """
    file_cfg = {}
    if config_file is not None:
        try:
            file_cfg = json.loads(Path(config_file).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {config_file}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    env = env_overrides(environ)
    cli = cli or {}
    preset = preset or cli.get("preset") or env.get("preset") or file_cfg.get("preset") or "synth-ecg"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    cfg = default_config()
    merge(cfg, PRESET_OVERLAYS[preset])
    merge(cfg, file_cfg)
    merge(cfg, env)
    merge(cfg, cli)
    cfg["preset"] = preset
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    """Instantiate every section's dataclass so bad values fail before any work starts."""
    try:
        ecg_config(cfg)
        model_config(cfg, input_dim=1)
        train_config(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    fr = cfg["split"]["fractions"]
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("split.fractions must be three non-negative numbers summing to 1")


def ecg_config(cfg: dict) -> SynthEcgConfig:
    return SynthEcgConfig(seed=cfg["seed"], **cfg["ecg"])


def model_config(cfg: dict, input_dim: int) -> ModelConfig:
    names = {f.name for f in fields(ModelConfig)}
    extra = set(cfg["model"]) - names
    if extra:
        raise ConfigError(f"unknown model keys {sorted(extra)}")
    return ModelConfig(input_dim=input_dim, init_seed=cfg["seed"], **cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def with_overrides(cfg: dict, **kv) -> dict:
    out = copy.deepcopy(cfg)
    for k, v in kv.items():
        set_key(out, k, v)
    return out
