"""Run configuration: one JSON document with dot-path overrides.

The default document below lists every key.  A user file only needs the keys
it changes; it is merged over the defaults, then ``--set key=value``
overrides are applied (values parsed as JSON where possible, otherwise kept
as strings).  Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping, Sequence

from .hyperopt import DEFAULT_OFFSETS, Box

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """The configuration is malformed or inconsistent."""


def default_config() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "out_dir": "gpecm_out",
        "seed": 0,
        "data": {
            # a simulate manifest, or a list of per-cell telemetry CSV files
            "manifest": None,
            "cells": [],
            "column_map": {},
            "t_amb": None,
            "select_every": 30,
            "segment": {"rest_current": 0.05, "rest_s": 300.0, "min_duration_s": 60.0, "label": None, "lead_in_s": 30.0},
            "checkups": [],
            "checkup_protocol": {"cc_current": 1.0, "pulse_min": 0.5, "socs": [0.8, 0.5, 0.2]},
        },
        "simulation": {
            "n_cells": 1,
            "n_cycles": 1,
            "cycle_spacing_ah": 15.0,
            "duration_s": 1800,
            "i_max": 5.0,
            "mean_current": -1.0,
            "z_init": 0.9,
            "t_amb": 25.0,
            # multiplier per field: 1 + c1 * zeta + c2 * zeta^2 + ...
            "drift": {"q_inv": [], "alpha": [], "beta": [], "r0": []},
            "i_pulse": 2.0,
        },
        "model": {
            "n_z": 6,
            "n_r0_z": 4,
            "n_r0_i": 15,
            "offsets": dict(DEFAULT_OFFSETS),
            "q_batt": [1e-12, 1e-6, 1e-4],
            "p_batt0": [1e-4, 1e-6, 1e-2],
            "thermal": {"r_c": 5.5, "c_c": 15.7},
            "ocv_csv": None,
            "use_lambda": True,
            "range_margin": 0.02,
        },
        "fit": {
            "stage1": None,
            "stage2": None,
            "n_random": 1000,
            "n_refine": 25,
            "maxiter": 500,
            "fd_step": 1e-4,
            "lattice_n": 3,
            "box": Box.default().to_dict(),
        },
        "report": {
            "z_points": [0.8, 0.5, 0.2],
            "i_points": [-2.0],
            "n_curve": 21,
        },
        "forecast": {"zeta_star": []},
        "validate": {"holdout": 0},
    }


def _merge(base: dict, over: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and key not in _FREE_FORM:
            if not isinstance(val, Mapping):
                raise ConfigError(f"config key '{where}' must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


# objects whose keys are user data rather than schema
_FREE_FORM = {"column_map", "box"}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key.sub=value`` assignments."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key '{key}'")
            node = node[p]
        if not isinstance(node, dict) or (parts[-1] not in node and parts[-2:-1] != ["column_map"]):
            raise ConfigError(f"unknown config key '{key}'")
        node[parts[-1]] = _parse_value(text)
    return cfg


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> dict:
    """Defaults, merged with the JSON file at ``path`` (a config or a manifest), then overrides."""
    user: Mapping = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(user, Mapping):
            raise ConfigError("config must be a JSON object")
        if "config" in user and "command" in user:  # a manifest
            user = user["config"]
    version = user.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    cfg = apply_overrides(_merge(default_config(), user), overrides)
    validate_config(cfg)
    return cfg


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate_config(cfg: dict) -> None:
    m, s, f = cfg["model"], cfg["simulation"], cfg["fit"]
    _require(cfg["schema_version"] == SCHEMA_VERSION, "schema_version mismatch")
    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a non-negative integer")
    for k in ("n_z", "n_r0_z", "n_r0_i"):
        _require(isinstance(m[k], int) and m[k] >= 2, f"model.{k} must be an integer >= 2")
    _require(set(m["offsets"]) == set(DEFAULT_OFFSETS), "model.offsets needs q_inv, alpha, beta, r0")
    _require(all(float(v) > 0 for v in m["offsets"].values()), "model.offsets must be positive")
    for k in ("q_batt", "p_batt0"):
        _require(len(m[k]) == 3 and all(float(v) > 0 for v in m[k]), f"model.{k} needs three positive values")
    _require(m["thermal"]["r_c"] > 0 and m["thermal"]["c_c"] > 0, "thermal parameters must be positive")
    for k in ("n_cells", "n_cycles", "duration_s"):
        _require(isinstance(s[k], int) and s[k] >= 1, f"simulation.{k} must be a positive integer")
    _require(s["duration_s"] >= 60, "simulation.duration_s must be at least 60")
    _require(s["i_max"] > 0 and s["cycle_spacing_ah"] >= 0, "simulation.i_max and cycle_spacing_ah out of range")
    _require(0.0 < s["z_init"] <= 1.0, "simulation.z_init must lie in (0, 1]")
    _require(set(s["drift"]) <= set(DEFAULT_OFFSETS), "simulation.drift keys must be field names")
    _require(f["n_random"] >= 1 and 1 <= f["n_refine"] <= f["n_random"], "fit.n_random/n_refine out of range")
    _require(f["maxiter"] >= 0 and f["fd_step"] > 0 and f["lattice_n"] >= 1, "fit settings out of range")
    try:
        Box.from_dict(f["box"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"fit.box: {exc}") from None
    _require(cfg["data"]["select_every"] >= 1, "data.select_every must be >= 1")
    _require(cfg["validate"]["holdout"] >= 0, "validate.holdout must be >= 0")
    _require(cfg["report"]["n_curve"] >= 2, "report.n_curve must be >= 2")


def dumps(obj) -> str:
    """Canonical JSON text used for every file the tools write."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
