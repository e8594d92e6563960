"""Run configuration: one YAML file, strict schema, explicit defaults.

Unknown keys are rejected with their full path; every run writes its
resolved configuration next to its outputs so results are reproducible
from the artifacts alone.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from .arm import ArmSpec
from .auxtraj import make_aux_model
from .expert import ExpertParams, TaskSampler
from .policies import make_nn_policy, make_rmp_policy
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


DEFAULTS = {
    "seed": 0,
    "arm": {"link_lengths": [1.0, 0.8]},
    "data": {"ts": 0.01},
    "task": {
        "goal_center": [1.2, 0.6],
        "goal_std": 0.3,
        "reach_margin": 0.15,
        "start_x_range": [0.4, 1.4],
        "goal_clearance": 0.05,
    },
    "expert": {
        "table_y": 0.2,
        "lift_height": 0.3,
        "funnel_sigma": 0.2,
        "kp": 16.0,
        "kd": 8.0,
        "soft_radius": 0.1,
        "res_damping": 4.0,
        "res_weight": 0.05,
        "eps_goal": 0.02,
        "eps_vel": 0.05,
        "t_max": 600,
        "paper_funnel_rule": False,
    },
    "policy": {
        "class": "nn",
        "nn_hidden": [64, 32],
        "rmp_hidden": [32, 16],
        "activation": "elu",
        "diag_offset": 1.0e-5,
    },
    "aux": {
        "mode": "joint",
        "joint_hidden": [32, 16],
        "independent_hidden": [16, 8],
        "delta": None,
    },
    "train": {
        "method": "bc",
        "nu": 1.0,
        "lr0": 5.0e-3,
        "weight_decay": 1.0e-10,
        "lr_decay": 0.9,
        "plateau_patience": 500,
        "lr_min": 1.0e-6,
        "max_epochs": 50000,
        "batch_size": None,
        "noise_sigma": 0.05,
        "noise_fraction": 0.2,
        "decoupled_weight_decay": True,
        "alternating_updates": False,
    },
    "eval": {
        "n_validation": 0,
        "success_radius": 0.02,
    },
    "sweep": {
        "methods": ["bc", "code"],
        "classes": ["nn", "rmp"],
        "sizes": [40, 60],
        "seeds": [0, 1, 2],
        "n_validation": 20,
    },
}


def _merge_strict(defaults, override, path=""):
    if override is None:
        return copy.deepcopy(defaults)
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(override).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        base = defaults[key]
        if isinstance(base, dict):
            out[key] = _merge_strict(base, value, here)
        else:
            out[key] = _check_type(base, value, here)
    return out


def _check_type(base, value, path):
    if value is None:
        if base is None or path in ("train.batch_size", "aux.delta"):
            return None
        raise ConfigError(f"{path}: null is not allowed")
    if base is None:
        if isinstance(value, (int, float)):
            return value
        raise ConfigError(f"{path}: expected a number or null")
    if isinstance(base, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected a boolean")
    if isinstance(base, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return value
    if isinstance(base, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{path}: expected a string")
    if isinstance(base, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return value
    raise ConfigError(f"{path}: unsupported config type {type(base).__name__}")


def load_config(path=None) -> dict:
    """DEFAULTS deep-merged with the YAML file at ``path`` (if any)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return _merge_strict(DEFAULTS, raw)


def resolved_yaml(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_outputs(outdir, cfg: dict, input_digests: dict) -> None:
    """Drop the resolved config and input provenance into the output dir."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "resolved_config.yaml").write_text(resolved_yaml(cfg))
    (outdir / "provenance.json").write_text(
        json.dumps({"inputs": input_digests}, indent=2, sort_keys=True) + "\n"
    )


# ---------------------------------------------------------------------------
# object builders


def arm_from(cfg: dict) -> ArmSpec:
    return ArmSpec(link_lengths=np.array(cfg["arm"]["link_lengths"], dtype=np.float64))


def sampler_from(cfg: dict) -> TaskSampler:
    t = cfg["task"]
    return TaskSampler(
        goal_center=np.array(t["goal_center"], dtype=np.float64),
        goal_std=t["goal_std"],
        reach_margin=t["reach_margin"],
        start_x_range=tuple(t["start_x_range"]),
        goal_clearance=t["goal_clearance"],
    )


def expert_from(cfg: dict) -> ExpertParams:
    return ExpertParams(**cfg["expert"])


def train_config_from(cfg: dict, method=None, seed=None) -> TrainConfig:
    t = dict(cfg["train"])
    if method is not None:
        t["method"] = method
    return TrainConfig(seed=cfg["seed"] if seed is None else seed, **t)


def make_policy_from(cfg: dict, arm: ArmSpec, n_features: int, rng, policy_class=None):
    p = cfg["policy"]
    cls = policy_class or p["class"]
    if cls == "nn":
        return make_nn_policy(
            arm.d, n_features, rng, hidden=tuple(p["nn_hidden"]), activation=p["activation"]
        )
    if cls == "rmp":
        return make_rmp_policy(
            arm,
            n_features,
            rng,
            hidden=tuple(p["rmp_hidden"]),
            activation=p["activation"],
            diag_offset=p["diag_offset"],
        )
    raise ConfigError(f"unknown policy class {cls!r}; expected 'nn' or 'rmp'")


def make_aux_from(cfg: dict, d: int, ts: float, n_demos: int, context_dim: int, rng):
    a = cfg["aux"]
    mode = a["mode"]
    hidden = a["joint_hidden"] if mode == "joint" else a["independent_hidden"]
    return make_aux_model(
        mode,
        d,
        rng,
        ts,
        n_demos=n_demos,
        context_dim=context_dim,
        hidden=tuple(hidden),
        delta=a["delta"],
    )


def arch_from(cfg: dict) -> dict:
    return {
        "nn_hidden": cfg["policy"]["nn_hidden"],
        "rmp_hidden": cfg["policy"]["rmp_hidden"],
        "aux_hidden": cfg["aux"]["joint_hidden"]
        if cfg["aux"]["mode"] == "joint"
        else cfg["aux"]["independent_hidden"],
        "aux_mode": cfg["aux"]["mode"],
    }
