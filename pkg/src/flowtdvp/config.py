"""Run configuration: versioned JSON schema, experiment presets and overrides."""
import copy
import json

import jsonschema

SCHEMA_VERSION = 1
EXPERIMENTS = ("heat8d", "phasespace", "custom")
REFERENCES = ("auto", "none", "oracle", "radial", "sde")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


def _num(minimum=None, exclusive=False):
    s = {"type": "number"}
    if minimum is not None:
        s["exclusiveMinimum" if exclusive else "minimum"] = minimum
    return s


def _int(minimum=None):
    s = {"type": "integer"}
    if minimum is not None:
        s["minimum"] = minimum
    return s


def _obj(props):
    return {"type": "object", "additionalProperties": False, "required": sorted(props), "properties": props}


_NUMS = {"type": "array", "items": {"type": "number"}}
_NULLABLE_NUMS = {"type": ["array", "null"], "items": {"type": "number"}}

SCHEMA = _obj(
    {
        "schema_version": {"const": SCHEMA_VERSION},
        "experiment": {"enum": list(EXPERIMENTS)},
        "model": _obj(
            {
                "dim": _int(1),
                "n_blocks": _int(1),
                "hidden": {"type": ["integer", "null"], "minimum": 1},
                "include_t": {"type": "boolean"},
                "covariance": {"enum": ["cholesky", "identity_plus_aat"]},
                "split_seed": _int(0),
                "init_seed": _int(0),
            }
        ),
        "initial": _obj(
            {
                "family": {"enum": ["gaussian", "student_t"]},
                "mean": _NULLABLE_NUMS,
                "variance": {"oneOf": [_num(0, True), {"type": "array", "items": _num(0, True)}]},
                "nu": _num(0, True),
            }
        ),
        "problem": _obj(
            {
                "kind": {"enum": ["heat", "phase_space"]},
                "D": _num(0),
                "n_osc": _int(1),
                "m": _num(0, True),
                "omega": _num(0, True),
                "k": _num(0),
                "gamma": _num(0),
                "temps": {"type": "array", "items": _num(0)},
            }
        ),
        "integrator": _obj(
            {
                "scheme": {"enum": ["heun", "euler"]},
                "dt": _num(0, True),
                "t_end": _num(0),
                "n_samples": _int(2),
                "seed": _int(0),
                "adaptive": {"type": "boolean"},
                "tol": _num(0, True),
                "dt_min": _num(0, True),
                "shared_samples": {"type": "boolean"},
                "trainable": {"type": "array", "items": {"type": "string"}},
            }
        ),
        "regularization": _obj({"svd_rel_cutoff": _num(0), "tikhonov_shift": _num(0)}),
        "observables": _obj(
            {
                "every": _int(1),
                "n_samples": _int(2),
                "seed": _int(0),
                "ball_radii": {"type": "array", "items": _num(0, True)},
                "ball_center": _NULLABLE_NUMS,
                "stratified": {"type": "boolean"},
                "spectrum": {"type": "boolean"},
            }
        ),
        "reference": _obj(
            {
                "kind": {"enum": list(REFERENCES)},
                "n_particles": _int(2),
                "sde_dt": _num(0, True),
                "sde_scheme": {"enum": ["euler", "heun"]},
                "seed": _int(0),
                "grid": _obj(
                    {
                        "delta": _num(0, True),
                        "r_max": _num(0, True),
                        "lhopital_cells": _int(1),
                        "scheme": {"enum": ["crank_nicolson", "explicit_euler"]},
                        "dt_grid": _num(0, True),
                        "order": {"enum": [2, 4]},
                    }
                ),
            }
        ),
        "output": _obj({"dir": {"type": ["string", "null"]}, "checkpoint_every": _int(0)}),
    }
)

BASE = {
    "schema_version": SCHEMA_VERSION,
    "experiment": "custom",
    "model": {
        "dim": 2,
        "n_blocks": 4,
        "hidden": None,
        "include_t": False,
        "covariance": "identity_plus_aat",
        "split_seed": 0,
        "init_seed": 0,
    },
    "initial": {"family": "gaussian", "mean": None, "variance": 1.0, "nu": 2.0},
    "problem": {
        "kind": "heat",
        "D": 1.0,
        "n_osc": 3,
        "m": 1.0,
        "omega": 1.0,
        "k": 0.0,
        "gamma": 1.0,
        "temps": [10.0, 10.0, 10.0],
    },
    "integrator": {
        "scheme": "heun",
        "dt": 0.005,
        "t_end": 1.0,
        "n_samples": 10_000,
        "seed": 0,
        "adaptive": False,
        "tol": 1e-3,
        "dt_min": 1e-6,
        "shared_samples": False,
        "trainable": [],
    },
    "regularization": {"svd_rel_cutoff": 1e-8, "tikhonov_shift": 0.0},
    "observables": {
        "every": 20,
        "n_samples": 10_000,
        "seed": 1000,
        "ball_radii": [],
        "ball_center": None,
        "stratified": False,
        "spectrum": False,
    },
    "reference": {
        "kind": "auto",
        "n_particles": 10_000,
        "sde_dt": 1e-4,
        "sde_scheme": "euler",
        "seed": 2000,
        "grid": {
            "delta": 4e-3,
            "r_max": 100.0,
            "lhopital_cells": 10,
            "scheme": "crank_nicolson",
            "dt_grid": 1e-3,
            "order": 4,
        },
    },
    "output": {"dir": None, "checkpoint_every": 0},
}

PRESETS = {
    "custom": {},
    "heat8d": {
        "model": {"dim": 8, "include_t": False, "covariance": "identity_plus_aat"},
        "problem": {"kind": "heat", "D": 1.0},
        "integrator": {"t_end": 2.0, "dt": 0.005},
        "observables": {"every": 50},
    },
    "phasespace": {
        "model": {"dim": 6, "include_t": True, "covariance": "cholesky"},
        "initial": {"mean": [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]},
        "problem": {"kind": "phase_space", "n_osc": 3, "k": 0.0, "temps": [10.0, 10.0, 10.0]},
        "integrator": {"t_end": 10.0, "dt": 0.01},
        "observables": {"every": 50, "ball_radii": [10.0]},
    },
}

# short CLI spellings for frequently used fields
ALIASES = {
    "initial": "initial.family",
    "t-end": "integrator.t_end",
    "dt": "integrator.dt",
    "n-samples": "integrator.n_samples",
    "seed": "integrator.seed",
    "scheme": "integrator.scheme",
    "D": "problem.D",
    "k": "problem.k",
    "gamma": "problem.gamma",
    "temps": "problem.temps",
    "nu": "initial.nu",
    "mean": "initial.mean",
    "reference": "reference.kind",
    "out": "output.dir",
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(out[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def defaults(experiment="custom"):
    if experiment not in PRESETS:
        raise ConfigError(f"experiment: must be one of {list(EXPERIMENTS)}, got {experiment!r}")
    cfg = _merge(BASE, PRESETS[experiment])
    cfg["experiment"] = experiment
    return cfg


def leaf_paths(cfg=BASE, prefix=""):
    for key, val in cfg.items():
        path = f"{prefix}{key}"
        if isinstance(val, dict):
            yield from leaf_paths(val, path + ".")
        else:
            yield path


def _format_error(err):
    path = ".".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{path}: {err.message}"


def validate(cfg):
    """Schema check plus cross-field rules. Returns ``cfg`` or raises ConfigError."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(_format_error(e) for e in errors))
    m, ini, prob = cfg["model"], cfg["initial"], cfg["problem"]
    d = m["dim"]
    if d < 2:
        raise ConfigError("model.dim: coupling blocks need at least two coordinates")
    if prob["kind"] == "phase_space":
        if d != 2 * prob["n_osc"]:
            raise ConfigError(f"model.dim: phase space of {prob['n_osc']} oscillators has dimension {2 * prob['n_osc']}")
        if len(prob["temps"]) != prob["n_osc"]:
            raise ConfigError(f"problem.temps: need {prob['n_osc']} values")
    if ini["mean"] is not None and len(ini["mean"]) != d:
        raise ConfigError(f"initial.mean: need {d} values")
    if isinstance(ini["variance"], list) and len(ini["variance"]) != d:
        raise ConfigError(f"initial.variance: need {d} values")
    obs = cfg["observables"]
    if obs["ball_center"] is not None and len(obs["ball_center"]) != d:
        raise ConfigError(f"observables.ball_center: need {d} values")
    ref = cfg["reference"]["kind"]
    if ref == "radial":
        if prob["kind"] != "heat" or not is_standard_isotropic(cfg):
            raise ConfigError("reference.kind: the radial grid needs a heat problem and a zero-mean unit-variance initial density")
    if ref == "sde" and prob["kind"] != "phase_space":
        raise ConfigError("reference.kind: the SDE ensemble is implemented for the phase-space problem")
    if ref == "oracle" and ini["family"] != "gaussian":
        raise ConfigError("reference.kind: the closed-form oracle needs a Gaussian initial density")
    return cfg


def is_standard_isotropic(cfg):
    ini = cfg["initial"]
    mean_ok = ini["mean"] is None or all(v == 0 for v in ini["mean"])
    var = ini["variance"]
    var_ok = var == 1.0 if not isinstance(var, list) else all(v == 1.0 for v in var)
    return mean_ok and var_ok


def resolve_reference(cfg):
    """Concrete reference solver for ``reference.kind == "auto"``."""
    kind = cfg["reference"]["kind"]
    if kind != "auto":
        return kind
    if cfg["initial"]["family"] == "gaussian":
        return "oracle"
    if cfg["problem"]["kind"] == "heat" and is_standard_isotropic(cfg):
        return "radial"
    if cfg["problem"]["kind"] == "phase_space":
        return "sde"
    return "none"


def parse_value(text, current):
    """Interpret a CLI string using the type of the field's current value."""
    low = text.strip().lower()
    if low in ("null", "none"):
        return None
    if isinstance(current, bool):
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(current, list) or current is None and "," in text:
        if text.strip().startswith("["):
            return json.loads(text)
        if not text.strip():
            return []
        items = [s.strip() for s in text.split(",")]
        try:
            return [float(s) for s in items]
        except ValueError:
            return items
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if current is None:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return text


def apply_overrides(cfg, pairs):
    """Apply ``(dotted_path, raw_string)`` overrides in order."""
    cfg = copy.deepcopy(cfg)
    for path, raw in pairs:
        path = ALIASES.get(path, path)
        keys = path.split(".")
        node = cfg
        for i, key in enumerate(keys[:-1]):
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"{'.'.join(keys[: i + 1])}: unknown section")
            node = node[key]
        if keys[-1] not in node or isinstance(node[keys[-1]], dict):
            raise ConfigError(f"{path}: unknown key")
        try:
            node[keys[-1]] = parse_value(raw, node[keys[-1]])
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return cfg


def load(path=None, experiment=None, overrides=()):
    """Build a validated config: preset defaults, then the JSON file, then overrides."""
    user = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"<file>: cannot read {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("<root>: expected a JSON object")
    if user.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {user.get('schema_version')!r}")
    exp = experiment or user.get("experiment") or "custom"
    cfg = _merge(defaults(exp), user)
    cfg["experiment"] = exp
    cfg = apply_overrides(cfg, overrides)
    return validate(cfg)


def canonical_json(cfg):
    """Byte-stable echo: sorted keys, shortest round-trip float repr, LF endings."""
    return json.dumps(cfg, sort_keys=True, indent=2, ensure_ascii=True, allow_nan=False) + "\n"
