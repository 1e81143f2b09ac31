"""Run configuration: defaults, JSON-schema validation, leaf overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .exceptions import ConfigError

_pos = {"type": "number", "exclusiveMinimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_seed = {"type": "integer", "minimum": 0}
_path = {"type": "string", "minLength": 1}
_opt_path = {"type": ["string", "null"]}
_confset = {"type": "string", "pattern": r"^(none|(bcov|svar|bb)(\+(bcov|svar|bb))*)$"}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


HRF = _obj({k: _pos for k in ("peak_delay", "undershoot_delay", "peak_dispersion",
                              "undershoot_dispersion", "kernel_length", "microtime_dt")}
           | {"undershoot_ratio": {"type": "number", "minimum": 0}})
SEARCHLIGHT = _obj({"radius_mm": _pos, "min_voxels": _int1})
DESIGN = _obj({"n_blocks": _int1, "trials_per_block": _int1, "stimulus_duration": _pos,
               "block_duration": _pos, "baseline_duration": {"type": "number", "minimum": 0},
               "tr": _pos, "n_scans": _int1})
GEOMETRY = _obj({"dims": {"type": "array", "items": _int1, "minItems": 3, "maxItems": 3},
                 "voxel_size": {"type": "array", "items": _pos, "minItems": 3, "maxItems": 3}})
NOISE = _obj({"rho": {"oneOf": [{"type": "number", "minimum": -0.999, "maximum": 0.999},
                                {"const": "estimate"}]},
              "highpass_cutoff": {"type": ["number", "null"], "exclusiveMinimum": 0}})
METHOD = {"enum": ["pearson", "spearman"]}
SIMILARITY = {"enum": ["sscp", "neg-correlation"]}

SCHEMAS = {
    "simulate": _obj({
        "out": _path, "seed": _seed, "n_subjects": _int1,
        "patterns": {"type": "array", "items": {"enum": ["A", "B"]}, "minItems": 1},
        "confounder_sets": {"type": "array", "items": _confset, "minItems": 1},
        "geometry": GEOMETRY, "design": DESIGN, "hrf": HRF, "searchlight": SEARCHLIGHT,
        "offset": _int1, "method": METHOD, "similarity": SIMILARITY,
        "n_label_perm": {"type": "integer", "minimum": 0},
        "write_betas": {"type": "boolean"},
    }, required=["out"]),
    "glm-fit": _obj({
        "out": _path, "data": _path, "mask": _opt_path, "events": _path,
        "tr": _pos, "hrf": HRF, "noise": NOISE, "nuisance": _opt_path,
    }, required=["out", "data", "events"]),
    "rsa": _obj({
        "out": _path, "betas": _path, "mask": _opt_path, "bcov": _opt_path,
        "labels": {"oneOf": [_path, {"type": "array", "minItems": 3}]},
        "confounder_sets": {"type": "array", "items": _confset, "minItems": 1},
        "searchlight": SEARCHLIGHT, "offset": _int1, "method": METHOD,
        "similarity": SIMILARITY, "subject_id": {"type": "string"},
    }, required=["out", "betas", "labels"]),
    "group": _obj({
        "out": _path, "maps": {"type": "array", "items": _path, "minItems": 3},
        "fwhm_mm": {"type": "number", "minimum": 0}, "n_perm": {"type": "integer", "minimum": 100},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": _seed, "fisher_z": {"type": "boolean"},
    }, required=["out", "maps"]),
    "perm-labels": _obj({
        "out": _path, "events": _opt_path, "design": DESIGN, "hrf": HRF, "noise": NOISE,
        "patterns": {"type": "object",
                     "additionalProperties": {"oneOf": [{"enum": ["A", "B"]},
                                                        {"type": "array", "minItems": 3}]}},
        "n_perm": _int1, "seed": _seed, "offset": _int1,
    }, required=["out"]),
}

DEFAULTS = {
    "simulate": {
        "seed": 0, "n_subjects": 30, "patterns": ["A", "B"],
        "confounder_sets": ["none", "bcov"],
        "geometry": {"dims": [16, 16, 16], "voxel_size": [2.0, 2.0, 2.0]},
        "design": {}, "hrf": {}, "searchlight": {"radius_mm": 8.0, "min_voxels": 27},
        "offset": 1, "method": "pearson", "similarity": "sscp",
        "n_label_perm": 0, "write_betas": False,
    },
    "glm-fit": {"mask": None, "tr": 2.26, "hrf": {}, "nuisance": None,
                "noise": {"rho": "estimate", "highpass_cutoff": 128.0}},
    "rsa": {"mask": None, "bcov": None, "confounder_sets": ["none", "bcov"],
            "searchlight": {"radius_mm": 8.0, "min_voxels": 27}, "offset": 1,
            "method": "pearson", "similarity": "sscp", "subject_id": ""},
    "group": {"fwhm_mm": 4.0, "n_perm": 2000, "alpha": 0.05, "seed": 0, "fisher_z": False},
    "perm-labels": {"events": None, "design": {}, "hrf": {},
                    "noise": {"rho": 0.0, "highpass_cutoff": None},
                    "patterns": {"A": "A", "B": "B"}, "n_perm": 2000, "seed": 0, "offset": 1},
}


# user values replace these defaults wholesale instead of merging into them
_REPLACE = {"patterns"}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in _REPLACE:
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> None:
    """Set a leaf from ``dotted.key=value`` (value parsed as JSON if possible)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not an object")
    node[parts[-1]] = _parse_value(value)


def resolve(command: str, user: dict, overrides=()) -> dict:
    """Merge defaults, user config and overrides; validate against the schema."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    if not isinstance(user, dict):
        raise ConfigError("configuration must be a JSON object")
    cfg = copy.deepcopy(user)
    for o in overrides:
        apply_override(cfg, o)
    cfg = _merge(DEFAULTS[command], cfg)
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(cfg), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            raise ConfigError(f"config field {where}: unknown key(s) {extra}")
        raise ConfigError(f"config field {where}: {err.message}")
    return cfg


def load(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
