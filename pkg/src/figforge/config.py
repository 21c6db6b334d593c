"""The single JSON run configuration shared by all CLI subcommands."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from .errors import ConfigError

_num = {"type": "number"}
_int = {"type": "integer"}
_range = {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}

LAYOUT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "grid_rows": {"type": "integer", "minimum": 1},
        "grid_cols": {"type": "integer", "minimum": 1},
        "custom_rows": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "h_margin_range": _range,
        "v_margin_range": _range,
        "border": {"type": "integer", "minimum": 0},
        "label_scheme": {"type": ["string", "null"]},
        "label_position": {"type": ["string", "null"]},
        "panel_aspect": {"type": ["number", "string"]},
        "panel_base_size": {"type": "integer", "minimum": 1},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "layout": {"oneOf": [LAYOUT_SCHEMA, {"type": "array", "items": LAYOUT_SCHEMA, "minItems": 1}]},
        "mix": {"type": "object", "additionalProperties": _num},
        "pool_index": {"type": "string"},
        "label_style": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "font_px": {"type": ["integer", "null"], "minimum": 1},
                "color": {"type": "array", "items": _int, "minItems": 3, "maxItems": 3},
                "background": {"type": ["array", "null"], "items": _int, "minItems": 3, "maxItems": 3},
            },
        },
        "generation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "count": {"type": "integer", "minimum": 0},
                "master_seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                "workers": {"type": "integer", "minimum": 1},
                "out_dir": {"type": "string"},
                "split": {"type": ["string", "null"], "enum": ["train", "validation", None]},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iou_thresholds": {"type": "array", "items": _num, "minItems": 1},
                "f1_iou": _num,
                "score_threshold": _num,
            },
        },
        "perturbations": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind"],
                "properties": {"kind": {"type": "string"}, "magnitude": _num, "seed": _int},
            },
        },
        "filters": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "min_score": _num,
                "nms_iou": _num,
                "score_threshold": _num,
            },
        },
        "retrieval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"k": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}},
        },
        "mmd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "permutations": {"type": "integer", "minimum": 1},
                "kernel_sigma": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
    },
}


def validate_config(doc: dict) -> dict:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from exc
    return doc


def load_config(path) -> dict:
    """Read and validate a run config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    validate_config(doc)
    base = path.parent
    if "pool_index" in doc:
        doc["pool_index"] = str((base / doc["pool_index"]).resolve())
    gen = doc.get("generation", {})
    if "out_dir" in gen:
        gen["out_dir"] = str((base / gen["out_dir"]).resolve())
    return doc
