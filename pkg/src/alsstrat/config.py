"""Pipeline configuration: TOML sections layered over built-in defaults."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Mapping

from .exceptions import ConfigError
from .sampler import NLCD_YEARS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "workers": 8,
    "out": "out",
    "backend": {
        "source": "",
        "cache": "",
        "max_attempts": 3,
        "base_delay": 0.5,
        "backoff_factor": 2.0,
    },
    "plan": {
        "rasters": "",
        "patch_size": 500.0,
        "cap": 40,
        "allowed_landcover": ["Developed", "Forest"],
        "slope_thresholds": [5.0, 17.0],
        "nlcd_years": list(NLCD_YEARS),
        "method": "systematic",
        "max_nodata_fraction": 0.5,
        "capture_year": 0,
    },
    "stats": {
        "subsample": 1.0,
    },
    "prep": {
        "crop_size": 144.0,
        "voxel_size": 0.6,
        "max_voxels": 200_000,
        "max_points_per_voxel": 5,
        "bev_cell": [4.8, 4.8, 288.0],
        "max_cells": 200_000,
        "max_points_per_cell": 30,
        "mask_ratio": 0.7,
        "scale_range": [0.95, 1.05],
        "max_shift": [5.0, 5.0, 1.0],
        "augment": True,
        "samples_per_tile": 1,
    },
    "tile": {
        "window": 100.0,
        "stride": 100.0,
        "flush": False,
        "split": [0.6625, 0.16875, 0.16875],
        "labels": "",
    },
    "eval": {
        "num_classes": 0,
        "strict": False,
        "class_names": [],
    },
}

# settings that may change how fast a run goes but never what it writes
_UNHASHED = ("workers", "out")


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        default = base[key]
        if isinstance(default, dict):
            if not isinstance(val, Mapping):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(default, val, where + ".")
            continue
        out[key] = _coerce(where, default, val)
    return out


def _coerce(where: str, default, val):
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{where!r} must be true or false, got {val!r}")
        return val
    if isinstance(default, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{where!r} must be an integer, got {val!r}")
        return val
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{where!r} must be a number, got {val!r}")
        return float(val)
    if isinstance(default, str):
        if not isinstance(val, str):
            raise ConfigError(f"{where!r} must be a string, got {val!r}")
        return val
    if isinstance(default, list):
        if not isinstance(val, list):
            raise ConfigError(f"{where!r} must be a list, got {val!r}")
        if default and isinstance(default[0], float):
            return [_coerce(where, 0.0, v) for v in val]
        return list(val)
    return val


def load_config(path: str | Path | None = None, overrides: Mapping | None = None) -> dict:
    """Defaults, then the TOML file, then ``overrides`` (same nesting)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["workers"] < 1:
        raise ConfigError("workers must be at least 1")
    p = cfg["plan"]
    if p["patch_size"] <= 0 or p["cap"] < 1:
        raise ConfigError("plan.patch_size must be positive and plan.cap at least 1")
    lo, hi = (p["slope_thresholds"] + [None, None])[:2]
    if len(p["slope_thresholds"]) != 2 or not 0 <= lo < hi < 90:
        raise ConfigError("plan.slope_thresholds must be two increasing angles in [0, 90)")
    if p["method"] not in ("systematic", "reservoir"):
        raise ConfigError(f"plan.method must be 'systematic' or 'reservoir', got {p['method']!r}")
    if not 0 < cfg["stats"]["subsample"] <= 1:
        raise ConfigError("stats.subsample must be in (0, 1]")
    pr = cfg["prep"]
    if not 0 < pr["mask_ratio"] < 1:
        raise ConfigError("prep.mask_ratio must be in (0, 1)")
    if len(pr["bev_cell"]) != 3 or len(pr["scale_range"]) != 2 or len(pr["max_shift"]) != 3:
        raise ConfigError("prep.bev_cell, prep.scale_range and prep.max_shift need 3, 2 and 3 values")
    if pr["samples_per_tile"] < 1:
        raise ConfigError("prep.samples_per_tile must be at least 1")
    t = cfg["tile"]
    if not 0 < t["stride"] <= t["window"]:
        raise ConfigError("tile.stride must be in (0, tile.window]")
    if len(t["split"]) != 3 or abs(sum(t["split"]) - 1) > 1e-9 or min(t["split"]) < 0:
        raise ConfigError("tile.split must be three non-negative fractions summing to 1")


def config_hash(cfg: Mapping) -> str:
    """Digest of every setting that can influence outputs."""
    material = {k: copy.deepcopy(v) for k, v in cfg.items() if k not in _UNHASHED}
    material.get("backend", {}).pop("cache", None)
    blob = json.dumps(material, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dump_toml(cfg: Mapping) -> str:
    """Render a resolved config back to TOML (flat scalars first, then tables)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return json.dumps(v)

    lines = [f"{k} = {fmt(v)}" for k, v in cfg.items() if not isinstance(v, dict)]
    for k, v in cfg.items():
        if isinstance(v, dict):
            lines.append(f"\n[{k}]")
            lines.extend(f"{kk} = {fmt(vv)}" for kk, vv in v.items())
    return "\n".join(lines) + "\n"
