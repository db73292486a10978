"""Repo-wide configuration: defaults, JSON loading, and validation.

One structured-text (JSON) file configures every module.  Unknown keys are
rejected; every field can be overridden individually.  The file path comes
from --config or the GEOTROT_CONFIG environment variable.

Default provenance:
  body.mass / inertia  10 kg torso, uniform-box inertia of a 0.36x0.19x0.11 m
                       box (A1 torso approximation); gravity z-up, -9.81.
  mpc.q/r/terminal     tuned to pass the hover and terrain acceptance runs.
  mpc.horizon/dt/mu/   horizon 10 at 0.05 s; friction 0.6; 500 N force cap
  lambda_max           (~5x body weight).
  legs.*               public Unitree A1 geometry.
  swing.*              gains tuned for 1 cm RMS kinematic tracking; 5 cm
                       clearance.
  gait.*               8 nodes/phase, durations bounded [0.05, 0.4] s,
                       initial guesses 0.1 s single / 0.05 s double stance,
                       body height floor 0.15 m, stance height 0.28 m.
  terrain.*            6"x16" blocks, 7-18 cm gaps, 1 cm grid, 5 cm margin,
                       30 deg normal threshold, -0.3 m gap depth.
  sim.*                1 kHz plant, 20 Hz control, 0.25 m/s nominal command,
                       body-height failure band [0.15, 0.45] m.
"""

from __future__ import annotations

import copy
import json
import os

import numpy as np

DEFAULT_CONFIG: dict = {
    "body": {
        "mass": 10.0,
        "inertia_diag": [0.02, 0.06, 0.07],
        "gravity": [0.0, 0.0, -9.81],
    },
    "mpc": {
        "q_diag": [50.0, 50.0, 100.0, 10.0, 10.0, 10.0, 100.0, 100.0, 100.0, 5.0, 5.0, 5.0],
        "r_diag": [1e-3, 1e-3, 1e-3, 1e-2, 1e-2, 1e-2],
        "terminal_scale": 5.0,
        "horizon": 10,
        "dt": 0.05,
        "mu": 0.6,
        "lambda_max": 500.0,
        "lambda_reg": 1e-6,
        "eps": 1e-5,
    },
    "legs": {
        "l_abd": 0.0838,
        "l_thigh": 0.2,
        "l_calf": 0.2,
        "hip_x": 0.1805,
        "hip_y": 0.047,
        "abd_limits": [-0.8, 0.8],
        "hip_limits": [-1.05, 4.19],
        "knee_limits": [-2.7, -0.1],
    },
    "swing": {
        "kp": 700.0,
        "kd": 10.0,
        "clearance": 0.05,
    },
    "solver": {
        "eps_abs": 1e-6,
        "eps_rel": 1e-6,
        "max_iter": 4000,
    },
    "gait": {
        "grid": [-0.2, -0.1, 0.0, 0.1, 0.2],
        "nodes_per_phase": 8,
        "single_duration_guess": 0.1,
        "double_duration_guess": 0.05,
        "duration_bounds": [0.05, 0.4],
        "min_height": 0.15,
        "stance_height": 0.28,
        "force_weight": 1.0,
        "moment_weight": 10.0,
        "max_sqp_iter": 200,
    },
    "sim": {
        "plant_dt": 0.001,
        "control_dt": 0.05,
        "nominal_velocity": 0.25,
        "height_limits": [0.15, 0.45],
        "max_time": 60.0,
        "raibert_kv": 0.03,
    },
    "terrain": {
        "resolution": 0.01,
        "block_length": 0.1524,
        "block_width": 0.4064,
        "gap_range": [0.07, 0.18],
        "margin": 0.05,
        "normal_max_slope_deg": 30.0,
        "gap_depth": -0.3,
        "search_radius": 0.15,
    },
}

ENV_VAR = "GEOTROT_CONFIG"


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected a table")
            out[key] = _merge(base[key], value, here)
        else:
            expected = base[key]
            if isinstance(expected, bool) != isinstance(value, bool):
                raise ConfigError(f"{here}: type mismatch")
            if isinstance(expected, (int, float)) and not isinstance(value, (int, float)):
                raise ConfigError(f"{here}: expected a number")
            if isinstance(expected, list) and not isinstance(value, list):
                raise ConfigError(f"{here}: expected a list")
            out[key] = copy.deepcopy(value)
    return out


class RepoConfig:
    """Validated configuration tree with typed section accessors."""

    def __init__(self, data: dict | None = None):
        self.data = _merge(DEFAULT_CONFIG, data or {})
        self._validate()

    def _validate(self):
        b = self.data["body"]
        if b["mass"] <= 0:
            raise ConfigError("body.mass must be positive")
        if len(b["inertia_diag"]) != 3 or any(v <= 0 for v in b["inertia_diag"]):
            raise ConfigError("body.inertia_diag must be three positive values")
        if len(self.data["mpc"]["q_diag"]) != 12 or len(self.data["mpc"]["r_diag"]) != 6:
            raise ConfigError("mpc weight diagonals must be 12 / 6 long")
        lo, hi = self.data["gait"]["duration_bounds"]
        if not 0 < lo <= hi:
            raise ConfigError("gait.duration_bounds must be 0 < lo <= hi")
        if self.data["terrain"]["resolution"] <= 0:
            raise ConfigError("terrain.resolution must be positive")
        sim = self.data["sim"]
        ratio = sim["control_dt"] / sim["plant_dt"]
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("sim.control_dt must be an integer multiple of sim.plant_dt")

    @classmethod
    def load(cls, path=None) -> "RepoConfig":
        """Load overrides from `path`, the GEOTROT_CONFIG env var, or defaults."""
        if path is None:
            path = os.environ.get(ENV_VAR)
        if path is None:
            return cls()
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls(data)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    # -- section builders ---------------------------------------------------

    def body_params(self):
        from .dynamics import BodyParams

        b = self.data["body"]
        return BodyParams(
            mass=float(b["mass"]),
            inertia=np.diag(b["inertia_diag"]),
            gravity=np.array(b["gravity"], dtype=float),
        )

    def mpc_weights(self):
        from .mpc import MpcWeights

        m = self.data["mpc"]
        Q = np.diag(m["q_diag"])
        return MpcWeights(
            Q=Q,
            R=np.diag(m["r_diag"]),
            P=float(m["terminal_scale"]) * Q,
            horizon=int(m["horizon"]),
            dt=float(m["dt"]),
            mu=float(m["mu"]),
            lambda_max=float(m["lambda_max"]),
            lambda_reg=float(m["lambda_reg"]),
        )

    def mpc_qp_settings(self):
        from .qp import QpSettings

        eps = float(self.data["mpc"]["eps"])
        return QpSettings(eps_abs=eps, eps_rel=eps, polish=False)

    def qp_settings(self):
        from .qp import QpSettings

        s = self.data["solver"]
        return QpSettings(
            eps_abs=float(s["eps_abs"]),
            eps_rel=float(s["eps_rel"]),
            max_iter=int(s["max_iter"]),
        )

    def leg_config(self):
        from .legs import LegConfig

        l = self.data["legs"]
        return LegConfig(
            l_abd=float(l["l_abd"]),
            l_thigh=float(l["l_thigh"]),
            l_calf=float(l["l_calf"]),
            hip_x=float(l["hip_x"]),
            hip_y=float(l["hip_y"]),
            abd_limits=tuple(l["abd_limits"]),
            hip_limits=tuple(l["hip_limits"]),
            knee_limits=tuple(l["knee_limits"]),
        )

    def swing_gains(self):
        s = self.data["swing"]
        return float(s["kp"]) * np.eye(3), float(s["kd"]) * np.eye(3)

    def gait_settings(self):
        from .gaits import CollocationSettings

        g = self.data["gait"]
        return CollocationSettings(
            nodes_per_phase=int(g["nodes_per_phase"]),
            single_duration=float(g["single_duration_guess"]),
            double_duration=float(g["double_duration_guess"]),
            duration_bounds=tuple(g["duration_bounds"]),
            min_height=float(g["min_height"]),
            stance_height=float(g["stance_height"]),
            force_weight=float(g["force_weight"]),
            moment_weight=float(g["moment_weight"]),
            max_sqp_iter=int(g["max_sqp_iter"]),
            mu=float(self.data["mpc"]["mu"]),
            lambda_max=float(self.data["mpc"]["lambda_max"]),
        )

    def grid(self) -> list[float]:
        return [float(v) for v in self.data["gait"]["grid"]]
