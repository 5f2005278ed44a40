"""Run configuration: defaults, config-file loading, and flag overrides.

A run is configured from three layers, later ones winning: built-in
defaults, an optional JSON config file, and explicit command-line flags.
Unknown keys anywhere in the file are rejected rather than ignored, and the
effective configuration is echoed into every output artifact so results
stay attributable.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping

from .dataio import InputFormatError
from .fusion import SoftNmsConfig
from .grouping import GroupingConfig
from .losses import FocalParams

DEFAULTS: dict[str, Any] = {
    "grouping": {
        "tau_e": 0.1,
        "tau_c": 0.1,
        "k1": 40,
        "k2": 100,
        "kernel": 3,
        "center_interp": "nearest",
    },
    "soft_nms": {
        "sigma": 0.5,
        "score_floor": 0.001,
        "method": "gaussian",
        "linear_iou_threshold": 0.3,
    },
    "focal": {
        "alpha": 2.0,
        "beta": 4.0,
        "clamp_eps": 1e-12,
    },
    "eval": {
        "iou_threshold": 0.5,
        "pad": 5.0,
        "fp_targets": [0.5, 1.0, 2.0, 3.0, 4.0],
    },
    "render": {
        "stride": 4,
        "input_size": 511,
        "min_overlap": 0.3,
        "sigma_divisor": 3.0,
    },
    # (level, width) pairs for multi-window CT display normalization
    "window_presets": [[50, 449], [-505, 1980], [446, 1960]],
}


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise InputFormatError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise InputFormatError(f"config key {where} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None) -> dict[str, Any]:
    """Defaults merged with an optional JSON config file."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"{path}: malformed JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InputFormatError(f"{path}: config root must be an object")
    return _merge(DEFAULTS, data)


def apply_overrides(
    cfg: dict[str, Any], section: str, overrides: Mapping[str, Any]
) -> dict[str, Any]:
    """Set non-None override values into one section of the config."""
    out = copy.deepcopy(cfg)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in out[section]:
            raise InputFormatError(f"unknown config key: {section}.{key}")
        out[section][key] = value
    return out


def grouping_config(cfg: Mapping[str, Any]) -> GroupingConfig:
    return GroupingConfig(**cfg["grouping"])


def soft_nms_config(cfg: Mapping[str, Any]) -> SoftNmsConfig:
    return SoftNmsConfig(**cfg["soft_nms"])


def focal_params(cfg: Mapping[str, Any]) -> FocalParams:
    return FocalParams(**cfg["focal"])
