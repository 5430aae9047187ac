"""Pipeline configuration: JSON file plus dotted command-line overrides."""
from __future__ import annotations

import copy
import json

DEFAULT_CONFIG = {
    "paths": {"model": None, "calibration": None, "output": "out"},
    "targets": {"alpha": 0.3, "sparse_ratio": 0.125, "granularity": 4},
    "allocator": {"threshold": 0.5, "temperature": 1.0, "basis_rank": None},
    "decomposition": {"iters": 80, "adapt_steps": 100, "adapt_lr": 1e-2},
    "hardware": {"engine_config": None, "energy_params": None, "batch_tokens": 197},
    "seed": 0,
}

_FIELD_TYPES = {
    "paths.model": str,
    "paths.calibration": str,
    "paths.output": str,
    "targets.alpha": float,
    "targets.sparse_ratio": float,
    "targets.granularity": int,
    "allocator.threshold": float,
    "allocator.temperature": float,
    "allocator.basis_rank": int,
    "decomposition.iters": int,
    "decomposition.adapt_steps": int,
    "decomposition.adapt_lr": float,
    "hardware.engine_config": str,
    "hardware.energy_params": str,
    "hardware.batch_tokens": int,
    "seed": int,
}


class ConfigError(ValueError):
    pass


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    """Merge defaults <- config file <- ``key.path=value`` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            file_cfg = json.load(fh)
        _merge(cfg, file_cfg, prefix="")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, _, value = item.partition("=")
        set_field(cfg, key.strip(), value.strip())
    _validate(cfg)
    return cfg


def _merge(dst: dict, src: dict, prefix: str) -> None:
    for key, value in src.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict) and isinstance(dst.get(key), dict):
            _merge(dst[key], value, prefix=f"{dotted}.")
        elif dotted in _FIELD_TYPES or key in dst:
            dst[key] = value
        else:
            raise ConfigError(f"unknown config field {dotted!r}")


def set_field(cfg: dict, dotted: str, raw: str) -> None:
    caster = _FIELD_TYPES.get(dotted)
    if caster is None:
        raise ConfigError(f"unknown config field {dotted!r}")
    value = None if raw in ("null", "none", "None") else caster(raw)
    node = cfg
    *parents, leaf = dotted.split(".")
    for part in parents:
        node = node[part]
    node[leaf] = value


def _validate(cfg: dict) -> None:
    alpha = cfg["targets"]["alpha"]
    s = cfg["targets"]["sparse_ratio"]
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"targets.alpha must lie in (0, 1), got {alpha}")
    if not 0.0 < s < 1.0:
        raise ConfigError(f"targets.sparse_ratio must lie in (0, 1), got {s}")
    if cfg["targets"]["granularity"] < 1:
        raise ConfigError("targets.granularity must be >= 1")
    if cfg["decomposition"]["iters"] < 1:
        raise ConfigError("decomposition.iters must be >= 1")
