"""Declarative pipeline configuration: YAML text, schema validation, hashing."""
from __future__ import annotations

import copy
import hashlib
import json
import re
from pathlib import Path

import jsonschema
import yaml

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer", "minimum": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SCHEMA = _obj({
    "drift": _obj({
        "name": {"enum": ["ivdp", "linear", "polynomial"]},
        "params": {"type": "object", "additionalProperties": _NUM},
        "f": {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3}},
        "g": {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3}},
    }, ["name"]),
    "integrator": _obj({"rtol": _POS, "atol": _POS, "sweep_rtol": _POS}),
    "manifold": _obj({"order": _INT, "theta_samples": _INT, "nu": _POS, "tf": _POS}),
    "heteroclinics": _obj({"threshold": _POS, "horizon": _POS, "tol": _POS}),
    "maslov": _obj({"thetas": {"type": "array", "items": _NUM}}),
    "river": _obj({"samples": _INT, "refine_ratio": {"type": "number", "exclusiveMinimum": 0,
                                                       "exclusiveMaximum": 1},
                   "max_time": _POS, "mouth_gap": _POS, "pivot_grid": _INT, "collar": _POS}),
    "action": _obj({
        "epsilon": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "epsilon_scan": {"oneOf": [{"type": "null"}, _obj({"lo": _POS, "hi": _POS, "n": _INT},
                                                          ["lo", "hi", "n"])]},
        "r0": _POS, "border_distance": {"type": "number", "minimum": 0},
        "n_uniform": _INT, "n_geometric": {"type": "integer", "minimum": 0},
    }),
    "montecarlo": {"oneOf": [{"type": "null"}, _obj({
        "sqrt_eps": {"type": "number", "minimum": 0}, "n": _INT, "dt": _POS, "tmax": _POS,
        "keep_paths": {"enum": ["none", "escaped", "all"]},
        "convergence": {"type": "boolean"}, "max_doublings": {"type": "integer", "minimum": 0},
        "kde_paths": {"type": "integer", "minimum": 0}, "kde_radius": _POS,
    })]},
    "output": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "jobs": _INT,
})

DEFAULTS = {
    "drift": {"name": "ivdp", "params": {"eta": 0.5}},
    "integrator": {"rtol": 1e-10, "atol": 1e-12, "sweep_rtol": 1e-8},
    "manifold": {"order": 25, "theta_samples": 256, "nu": 1e-5, "tf": 12.0},
    "heteroclinics": {"threshold": 1e-2, "horizon": 40.0, "tol": 1e-12},
    "maslov": {"thetas": []},
    "river": {"samples": 64, "refine_ratio": 0.7, "max_time": 200.0, "mouth_gap": 0.005,
              "pivot_grid": 64, "collar": 0.32},
    "action": {"epsilon": [0.1024], "epsilon_scan": None, "r0": 0.1, "border_distance": 0.0,
               "n_uniform": 256, "n_geometric": 40},
    "montecarlo": {"sqrt_eps": 0.32, "n": 50000, "dt": 0.005, "tmax": 200.0,
                   "keep_paths": "none", "convergence": True, "max_doublings": 0,
                   "kde_paths": 0, "kde_radius": 0.3},
    "output": "mpep-out",
    "seed": 0,
    "jobs": 1,
}


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "1e-10" as a string; accept exponent floats without a dot
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    return cfg


def build(overrides: dict | None = None) -> dict:
    """Defaults merged with overrides; unknown keys are rejected."""
    overrides = overrides or {}
    cfg = _merge(DEFAULTS, overrides)
    if overrides.get("montecarlo", 0) is None:
        cfg["montecarlo"] = None
    return validate(cfg)


def parse(text: str) -> dict:
    data = yaml.load(text, Loader=_Loader) or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    return build(data)


def load(path) -> dict:
    return parse(Path(path).read_text())


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=float)


def digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(canonical(p).encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


def config_hash(cfg: dict) -> str:
    return digest(cfg)
