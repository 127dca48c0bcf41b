"""Run configuration: JSON schema, defaults and object construction."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError
from .nn import ETA_DIMS

_ESTIMATOR_ENTRY = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["exact", "parametric", "ntk_subset", "parametric_subset", "doubly", "stochastic"],
                 "default": "stochastic"},
        "curvature": {"enum": ["ntk", "ggn_full", "ggn_block", "ggn_diag", "kfac"], "default": "ntk"},
        "partition": {"enum": ["random", "output_wise", "class_grouped", "inputs", "full"], "default": "random"},
        "batch_size": {"type": ["integer", "null"], "minimum": 1, "default": None},
        "drop_last": {"type": "boolean", "default": True},
        "route": {"enum": ["parametric", "kernel", None], "default": None},
    },
}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_COUNT = {"type": "integer", "minimum": 0}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "marglik run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "network"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1, "default": 0},
        "output_dir": {"type": "string", "default": "runs"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["sinusoid", "blobs", "rotated_blobs", "mnist"]},
                "n": {"type": "integer", "minimum": 0, "default": 200},
                "n_test": {**_COUNT, "default": 0},
                "noise_sd": {"type": "number", "minimum": 0, "default": 0.2},
                "classes": {"type": "integer", "minimum": 1, "default": 3},
                "spread": {**_POS, "default": 0.3},
                "max_angle": {"type": "number", "minimum": 0, "default": 0.0},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "seed": {"type": ["integer", "null"], "minimum": 0, "default": None},
            },
        },
        "network": {
            "type": "object",
            "additionalProperties": False,
            "required": ["widths"],
            "properties": {
                "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
                "activation": {"enum": ["tanh", "relu", "identity"], "default": "tanh"},
            },
        },
        "likelihood": {"enum": ["gaussian", "categorical"], "default": "gaussian"},
        "hyper": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {
                "prior_mode": {"enum": ["scalar", "layerwise", "per_parameter"], "default": "scalar"},
                "prior_precision": {**_POS, "default": 1.0},
                "sigma2": {**_POS, "default": 1.0},
                "transformation": {"enum": ["none", "rotation2d", "rotation_image", "affine_image"],
                                   "default": "none"},
                "eta": {"type": "array", "items": {"type": "number", "minimum": 0}, "default": []},
                "n_samples": {"type": "integer", "minimum": 1, "default": 1},
                "learn_prior": {"type": "boolean", "default": True},
                "learn_sigma2": {"type": "boolean", "default": True},
                "learn_eta": {"type": "boolean", "default": True},
            },
        },
        "estimator": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {"kind": _ESTIMATOR_ENTRY["properties"]["kind"]},
        },
        "partition": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {
                "kind": {"enum": ["random", "output_wise", "class_grouped", "inputs", "full"], "default": "random"},
                "batch_size": {"type": ["integer", "null"], "minimum": 1, "default": 32},
                "drop_last": {"type": "boolean", "default": True},
            },
        },
        "curvature": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {"kind": {"enum": ["ntk", "ggn_full", "ggn_block", "ggn_diag", "kfac"], "default": "ntk"}},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {
                "epochs": {**_COUNT, "default": 100},
                "weight_batch_size": {"type": "integer", "minimum": 1, "default": 32},
                "weight_lr": {**_POS, "default": 1e-2},
                "weight_lr_end": {"type": ["number", "null"], "default": None},
                "weight_schedule": {"enum": ["constant", "cosine"], "default": "cosine"},
                "weight_optimizer": {"enum": ["adam", "sgd"], "default": "adam"},
                "momentum": {"type": "number", "minimum": 0, "default": 0.9},
                "hyper_lr_precision": {**_POS, "default": 0.1},
                "hyper_lr_sigma2": {**_POS, "default": 0.1},
                "hyper_lr_eta": {**_POS, "default": 0.05},
                "hyper_lr_decay": {**_POS, "default": 0.1},
                "burnin_epochs": {**_COUNT, "default": 10},
                "hyper_every_k": {"type": "integer", "minimum": 1, "default": 1},
                "hyper_steps_per_update": {"type": "integer", "minimum": 1, "default": 1},
                "fd_step_eta": {**_POS, "default": 1e-3},
            },
        },
        "limits": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {
                "max_full_ggn_dim": {"type": ["integer", "null"], "minimum": 1, "default": 4000},
                "max_ntk_dim": {"type": ["integer", "null"], "minimum": 1, "default": 4000},
                "cache_bytes": {**_COUNT, "default": 1 << 27},
            },
        },
        "state": {"type": ["string", "null"], "default": None},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {
                "axis": {"type": "string", "pattern": "^(log_precision|log_sigma2|eta_[0-9]+)$",
                         "default": "log_precision"},
                "values": {"type": "array", "items": _NUM},
                "range": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["start", "stop", "num"],
                    "properties": {"start": _NUM, "stop": _NUM, "num": {"type": "integer", "minimum": 1}},
                },
                "estimators": {"type": "array", "items": _ESTIMATOR_ENTRY, "default": [{"kind": "exact"}]},
            },
        },
        "pareto": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {
                "repetitions": {"type": "integer", "minimum": 1, "default": 5},
                "cells": {"type": "array", "items": _ESTIMATOR_ENTRY, "default": [{"kind": "exact"}]},
            },
        },
        "check": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {"instances": {"type": "integer", "minimum": 1, "default": 20}},
        },
        "report": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {"record_timing": {"type": "boolean", "default": True}},
        },
    },
}


def _fill_defaults(schema: dict, value):
    if schema.get("type") == "object" and isinstance(value, dict):
        for key, sub in schema.get("properties", {}).items():
            if key not in value and "default" in sub:
                value[key] = copy.deepcopy(sub["default"])
            if key in value:
                value[key] = _fill_defaults(sub, value[key])
    elif "items" in schema and isinstance(value, list):
        value = [_fill_defaults(schema["items"], v) for v in value]
    return value


def resolve(raw: dict) -> dict:
    """Validate against the schema and return a copy with every default filled in."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {err.message}") from None
    cfg = _fill_defaults(SCHEMA, copy.deepcopy(raw))
    widths = cfg["network"]["widths"]
    if cfg["hyper"]["transformation"] != "none" and not cfg["hyper"]["eta"]:
        cfg["hyper"]["eta"] = [0.0] * ETA_DIMS[cfg["hyper"]["transformation"]]
    if cfg["likelihood"] == "categorical" and cfg["dataset"]["kind"] in ("blobs", "rotated_blobs"):
        if widths[-1] != cfg["dataset"]["classes"]:
            raise ConfigError("network output width must equal the number of classes")
    if cfg["dataset"]["kind"] == "mnist" and not ("images" in cfg["dataset"] and "labels" in cfg["dataset"]):
        raise ConfigError("dataset: mnist needs 'images' and 'labels' paths")
    return cfg


def load(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    return resolve(raw)


def grid_values(grid: dict) -> np.ndarray:
    if "values" in grid:
        return np.asarray(grid["values"], dtype=np.float64)
    if "range" in grid:
        r = grid["range"]
        return np.linspace(r["start"], r["stop"], r["num"])
    raise ConfigError("grid: give 'values' or 'range'")


def write_schema(path):
    Path(path).write_text(json.dumps(SCHEMA, indent=2) + "\n")
