"""Strict JSON configuration: nested sections geometry / field / moment /
force / experiment / output.

Geometry lengths are given in centimeters (matching the device drawing,
keys suffixed _cm) and converted to SI at load; everything else is SI.
Unknown keys are rejected with their full path. An effective config (all
defaults materialized) can be emitted and re-parsed identically.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .carrier import ForceModel
from .errors import InvalidGeometry, ParseError, ValidationError
from .experiment import SimConfig
from .geometry import SGDParams
from .moment import MomentParams, TorqueModel

CM = 1.0e-2


def _defaults():
    return {
        "geometry": {
            "w_cm": 1.0,
            "h_t_cm": 1.75,
            "b_height_cm": 1.5,
            "h_cm": 0.75,
            "T_cm": 0.05,
            "b_t_cm": 0.05,
            "L_cm": 3.5,
            "standoff_cm": 1.0,
            "tip_half_angle_rad": math.pi / 4,
            "magnetization": [0.0, 0.0, -1.71e6],
            "include_top": True,
            "include_bottom": True,
        },
        "field": {
            "grid_spacing_m": 2.0e-4,
            "pad_x_m": 1.0e-3,
            "pad_y_m": 2.0e-3,
            "pad_z_m": 2.0e-3,
            "quad_rel_tol": 1.0e-6,
            "quad_max_depth": 20,
            "cache_path": None,
            "uniform_B": None,
        },
        "moment": {
            "mu": 9.274e-24,
            "inertia": 6.0e-39,
            "damping": 3.0e-33,
            "torque_model": {
                "kind": "semiclassical_tanh",
                "c": 2.0,
                "table_path": None,
            },
        },
        "force": {
            "model": "zonly",
            "suppression": True,
            "sigma_y_m": None,
        },
        "experiment": {
            "phi_steps": 101,
            "reps_per_phi": 100,
            "vx_mean": 550.0,
            "vx_sigma": 27.5,
            "beam_half_width_m": 1.0e-6,
            "dt_fast_s": 1.0e-9,
            "substeps": 100,
            "seed": 12345,
            "carrier_mass_kg": 1.79e-25,
            "detector_d_m": 0.1,
            "eps_class_rad": 1.0e-3,
            "theta_bands": 8,
        },
        "output": {
            "dir": "out",
            "trajectory_decimation": 0,
            "trajectories_max": 0,
            "hist_bins": 61,
        },
    }


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _positive(path, v):
    if not (_is_number(v) and v > 0):
        raise ValidationError(f"{path}: must be a positive number, got {v!r}")


def _non_negative(path, v):
    if not (_is_number(v) and v >= 0):
        raise ValidationError(f"{path}: must be a non-negative number, got {v!r}")


def _number(path, v):
    if not _is_number(v):
        raise ValidationError(f"{path}: must be a number, got {v!r}")


def _boolean(path, v):
    if not isinstance(v, bool):
        raise ValidationError(f"{path}: must be a boolean, got {v!r}")


def _integer(path, v):
    if not (isinstance(v, int) and not isinstance(v, bool)):
        raise ValidationError(f"{path}: must be an integer, got {v!r}")


def _positive_int(path, v):
    _integer(path, v)
    if v <= 0:
        raise ValidationError(f"{path}: must be positive, got {v!r}")


def _string(path, v):
    if not isinstance(v, str):
        raise ValidationError(f"{path}: must be a string, got {v!r}")


def _opt(check):
    def wrapped(path, v):
        if v is not None:
            check(path, v)
    return wrapped


def _vec3(path, v):
    if not (isinstance(v, list) and len(v) == 3 and all(_is_number(x) for x in v)):
        raise ValidationError(f"{path}: must be a 3-element number list, got {v!r}")


def _choice(*options):
    def check(path, v):
        if v not in options:
            raise ValidationError(f"{path}: must be one of {options}, got {v!r}")
    return check


_VALIDATORS = {
    "geometry": {
        "w_cm": _positive, "h_t_cm": _positive, "b_height_cm": _positive,
        "h_cm": _positive, "T_cm": _positive, "b_t_cm": _positive,
        "L_cm": _positive, "standoff_cm": _positive,
        "tip_half_angle_rad": _positive, "magnetization": _vec3,
        "include_top": _boolean, "include_bottom": _boolean,
    },
    "field": {
        "grid_spacing_m": _positive, "pad_x_m": _non_negative,
        "pad_y_m": _non_negative, "pad_z_m": _non_negative,
        "quad_rel_tol": _positive, "quad_max_depth": _positive_int,
        "cache_path": _opt(_string), "uniform_B": _opt(_vec3),
    },
    "moment": {
        "mu": _positive, "inertia": _positive, "damping": _non_negative,
        "torque_model": {
            "kind": _choice("classical", "semiclassical_tanh", "table"),
            "c": _positive, "table_path": _opt(_string),
        },
    },
    "force": {
        "model": _choice("full", "drift_aware", "zonly"),
        "suppression": _boolean, "sigma_y_m": _opt(_positive),
    },
    "experiment": {
        "phi_steps": _positive_int, "reps_per_phi": _positive_int,
        "vx_mean": _positive, "vx_sigma": _non_negative,
        "beam_half_width_m": _positive, "dt_fast_s": _positive,
        "substeps": _positive_int, "seed": _non_negative,
        "carrier_mass_kg": _positive, "detector_d_m": _positive,
        "eps_class_rad": _positive, "theta_bands": _positive_int,
    },
    "output": {
        "dir": _string, "trajectory_decimation": _non_negative,
        "trajectories_max": _non_negative, "hist_bins": _positive_int,
    },
}


def _merge_validate(defaults, user, validators, path=""):
    out = {}
    for key, dval in defaults.items():
        kpath = f"{path}.{key}" if path else key
        if isinstance(dval, dict):
            sub = user.get(key, {})
            if not isinstance(sub, dict):
                raise ValidationError(f"{kpath}: must be an object, got {sub!r}")
            out[key] = _merge_validate(dval, sub, validators[key], kpath)
        else:
            val = user.get(key, dval)
            if key in user:
                validators[key](kpath, val)
            out[key] = val
    for key in user:
        if key not in defaults:
            kpath = f"{path}.{key}" if path else key
            raise ValidationError(f"{kpath}: unknown key")
    return out


@dataclass
class FieldOptions:
    grid_spacing: float
    pad_x: float
    pad_y: float
    pad_z: float
    rel_tol: float
    max_depth: int
    cache_path: str | None
    uniform_B: list | None


@dataclass
class OutputOptions:
    dir: str
    trajectory_decimation: int
    trajectories_max: int
    hist_bins: int


@dataclass
class ConfigFile:
    """Validated configuration plus the effective (fully defaulted) dict."""

    sim: SimConfig
    field_opts: FieldOptions
    output: OutputOptions
    include_top: bool
    include_bottom: bool
    effective: dict

    def effective_json(self):
        return json.dumps(self.effective, indent=2, sort_keys=True) + "\n"


def _build(effective):
    g = effective["geometry"]
    mag = list(g["magnetization"])
    null_field = float(np.linalg.norm(mag)) == 0.0
    if null_field:
        # a zero-magnetization run is a null-field run; keep the geometry
        # object valid and force the field to zero instead
        mag = [0.0, 0.0, -1.71e6]
    try:
        geometry = SGDParams(
            w=g["w_cm"] * CM, h_t=g["h_t_cm"] * CM, b_height=g["b_height_cm"] * CM,
            h=g["h_cm"] * CM, T=g["T_cm"] * CM, b_t=g["b_t_cm"] * CM,
            L=g["L_cm"] * CM, tip_half_angle=g["tip_half_angle_rad"],
            magnetization=np.asarray(mag, dtype=np.float64),
            standoff=g["standoff_cm"] * CM)
    except InvalidGeometry as e:
        raise ValidationError(f"geometry: {e}") from e

    m = effective["moment"]
    tm_cfg = m["torque_model"]
    try:
        if tm_cfg["kind"] == "table":
            if not tm_cfg["table_path"]:
                raise ValidationError(
                    "moment.torque_model.table_path: required for kind 'table'")
            tm = TorqueModel.from_csv(tm_cfg["table_path"])
        elif tm_cfg["kind"] == "classical":
            tm = TorqueModel.classical()
        else:
            tm = TorqueModel.semiclassical_tanh(c=tm_cfg["c"])
        moment = MomentParams(mu=m["mu"], inertia_scalar=m["inertia"],
                              damping=m["damping"], torque_model=tm)
    except (ValueError, OSError) as e:
        raise ValidationError(f"moment: {e}") from e

    f = effective["force"]
    try:
        fm = ForceModel(kind=f["model"], suppression=f["suppression"],
                        sigma_y=f["sigma_y_m"])
    except ValueError as e:
        raise ValidationError(f"force: {e}") from e

    e = effective["experiment"]
    try:
        sim = SimConfig(
            phi_steps=e["phi_steps"], reps_per_phi=e["reps_per_phi"],
            vx_mean=e["vx_mean"], vx_sigma=e["vx_sigma"],
            beam_half_width=e["beam_half_width_m"], dt_fast=e["dt_fast_s"],
            substeps=e["substeps"], seed=e["seed"], force_model=fm,
            moment=moment, geometry=geometry, carrier_mass=e["carrier_mass_kg"],
            detector_d=e["detector_d_m"], eps_class=e["eps_class_rad"],
            theta_bands=e["theta_bands"])
    except ValueError as err:
        raise ValidationError(f"experiment: {err}") from err

    fopts = effective["field"]
    uniform_b = fopts["uniform_B"]
    if null_field and uniform_b is None:
        uniform_b = [0.0, 0.0, 0.0]
    field_opts = FieldOptions(
        grid_spacing=fopts["grid_spacing_m"], pad_x=fopts["pad_x_m"],
        pad_y=fopts["pad_y_m"], pad_z=fopts["pad_z_m"],
        rel_tol=fopts["quad_rel_tol"], max_depth=fopts["quad_max_depth"],
        cache_path=fopts["cache_path"], uniform_B=uniform_b)

    o = effective["output"]
    output = OutputOptions(dir=o["dir"],
                           trajectory_decimation=int(o["trajectory_decimation"]),
                           trajectories_max=int(o["trajectories_max"]),
                           hist_bins=int(o["hist_bins"]))
    return ConfigFile(sim=sim, field_opts=field_opts, output=output,
                      include_top=g["include_top"],
                      include_bottom=g["include_bottom"],
                      effective=effective)


def parse_config_dict(user):
    if not isinstance(user, dict):
        raise ValidationError(f"top level must be an object, got {type(user).__name__}")
    effective = _merge_validate(_defaults(), user, _VALIDATORS)
    return _build(effective)


def parse_config(path):
    """Load, validate and materialize a config file (JSON)."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ParseError(f"{path}: {e}") from e
    try:
        user = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    return parse_config_dict(user)


def default_config():
    return parse_config_dict({})
