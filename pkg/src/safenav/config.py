"""Scenario configuration files (JSON) and their translation into stacks.

A scenario file holds the blocks below; every block is optional and falls
back to the defaults shown in ``DEFAULTS``. Relative paths are resolved
against the directory of the file that mentions them, and referenced files
must exist at load time.

    {
      "name": "indoor",
      "world": {"kind": "indoor_cluttered", "overrides": {}, "file": null},
      "agent": {"model": "unicycle", "control_dt": 0.02, "plant_dt": 0.02, ...},
      "policy": {"kind": "noisy_goal_seeker", "params": {}, "weights": null},
      "sensor": {"max_range": 3.5, "rays_per_cone": 5},
      "disturbance": {"drift": [0, 0], "gust_sigma": 0, "sensor_sigma": 0},
      "filter": {"enabled": true, "sigma": 0.25, ...},
      "safe_set": null,
      "nmpc": null,
      "enumeration": {...},
      "tracking": {...},
      "episodes": 10, "seeds": [0], "output": "out"
    }
"""

from __future__ import annotations

import copy
import json
from dataclasses import fields, replace
from pathlib import Path

from .cbf import BarrierContext
from .dynamics import BoatParams
from .nmpc import NMPCConfig
from .policy import SensorConfig, ScriptedPolicy, load_network
from .simulator import DisturbanceConfig, StackConfig
from .verification import EnumerationConfig, SafeSet
from .world import World


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


DEFAULTS = {
    "name": "scenario",
    "world": {"kind": "indoor_cluttered", "overrides": {}, "file": None},
    "agent": {
        "model": "unicycle", "robot_radius": None, "control_dt": 0.02, "plant_dt": 0.02,
        "max_steps": 2000, "acceptance_radius": None, "boat": {},
    },
    "policy": {"kind": "goal_seeker", "params": {}, "weights": None},
    "sensor": {"max_range": 3.5, "rays_per_cone": 5},
    "disturbance": {"drift": [0.0, 0.0], "gust_sigma": 0.0, "sensor_sigma": 0.0},
    "filter": {"enabled": False},
    "safe_set": None,
    "nmpc": None,
    "enumeration": {
        "network": None,
        "properties": [],
        "harvest": None,
        "config": {},
        "density": None,
        "allow_incomplete": True,
    },
    "tracking": {"schedule": [[0.0, 0.8, 0.0], [8.0, 1.4, 0.4], [16.0, 0.6, -0.4], [24.0, 1.0, 0.0]],
                 "duration": 32.0, "drift": [0.0, 0.0]},
    "episodes": 10,
    "seeds": [0],
    "output": "out",
}

_PATH_KEYS = (("world", "file"), ("policy", "weights"), ("enumeration", "network"))


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown key {where}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("overrides", "params", "boat", "config", "filter"):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _resolve(path, root: Path) -> str:
    p = Path(path)
    if not p.is_absolute():
        p = root / p
    if not p.exists():
        raise ConfigError(f"referenced file does not exist: {p}")
    return str(p.resolve())


class ScenarioConfig:
    """Effective scenario configuration (defaults merged, paths resolved)."""

    def __init__(self, data: dict, root: Path | str = "."):
        root = Path(root)
        d = _merge(DEFAULTS, data, "")
        for block, key in _PATH_KEYS:
            if d[block][key] is not None:
                d[block][key] = _resolve(d[block][key], root)
        if d["safe_set"] is not None:
            d["safe_set"] = _resolve(d["safe_set"], root)
        enum = d["enumeration"]
        enum["properties"] = [_resolve(p, root) for p in enum["properties"]]
        if enum["harvest"] is not None:
            h = dict(enum["harvest"])
            h["trajectories"] = [_resolve(p, root) for p in h.get("trajectories", [])]
            enum["harvest"] = h
        if not isinstance(d["output"], str):
            raise ConfigError("output must be a directory path")
        d["output"] = str((root / d["output"]).resolve()) if not Path(d["output"]).is_absolute() else d["output"]
        self.data = d
        self.validate()

    # -- loading --------------------------------------------------------------

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls(data, path.parent)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def __eq__(self, other) -> bool:
        return isinstance(other, ScenarioConfig) and self.data == other.data

    def __getitem__(self, key):
        return self.data[key]

    # -- checks ---------------------------------------------------------------

    def validate(self) -> None:
        d = self.data
        model = d["agent"]["model"]
        if model not in ("unicycle", "boat"):
            raise ConfigError(f"agent.model must be 'unicycle' or 'boat', got {model!r}")
        if model == "boat" and d["nmpc"] is None:
            raise ConfigError("agent.model 'boat' needs an nmpc block")
        if d["policy"]["weights"] is None and d["policy"]["kind"] not in ScriptedPolicy.KINDS:
            raise ConfigError(f"policy.kind must be one of {ScriptedPolicy.KINDS} when no weights are given")
        if int(d["episodes"]) < 1:
            raise ConfigError("episodes must be >= 1")
        if not d["seeds"]:
            raise ConfigError("seeds must list at least one seed")
        try:
            self.barrier()
            self.nmpc_config()
            self.boat_params()
            self.disturbance()
            self.enumeration_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    # -- component builders -----------------------------------------------------

    def barrier(self) -> BarrierContext | None:
        ctx = BarrierContext.from_dict(dict(self.data["filter"]))
        return ctx if ctx.enabled else None

    def nmpc_config(self) -> NMPCConfig | None:
        n = self.data["nmpc"]
        return None if n is None else NMPCConfig.from_dict(n)

    def boat_params(self) -> BoatParams:
        known = {f.name for f in fields(BoatParams)}
        extra = set(self.data["agent"]["boat"]) - known
        if extra:
            raise ConfigError(f"unknown agent.boat keys: {sorted(extra)}")
        return BoatParams(**self.data["agent"]["boat"])

    def disturbance(self) -> DisturbanceConfig:
        return DisturbanceConfig(**self.data["disturbance"])

    def enumeration_config(self) -> EnumerationConfig:
        return EnumerationConfig(**self.data["enumeration"]["config"])

    def world_source(self):
        w = self.data["world"]
        if w["file"] is not None:
            return World.load(w["file"])
        return w["kind"]

    def stack(self, filter_enabled: bool | None = None) -> StackConfig:
        d = self.data
        agent = d["agent"]
        policy = d["policy"]
        pol = load_network(policy["weights"]) if policy["weights"] is not None else policy["kind"]
        ctx = self.barrier()
        if filter_enabled is False:
            ctx = None
        elif filter_enabled is True and ctx is None:
            ctx = replace(BarrierContext.from_dict(dict(d["filter"])), enabled=True)
        safe = SafeSet.load(d["safe_set"]) if d["safe_set"] is not None else None
        sensor = SensorConfig(float(d["sensor"]["max_range"]), int(d["sensor"]["rays_per_cone"]))
        return StackConfig(
            model=agent["model"], policy=pol, policy_params=dict(policy["params"]), filter=ctx, safe_set=safe,
            nmpc=self.nmpc_config(), boat=self.boat_params(), sensor=sensor, disturbance=self.disturbance(),
            robot_radius=agent["robot_radius"], control_dt=float(agent["control_dt"]),
            plant_dt=float(agent["plant_dt"]), max_steps=int(agent["max_steps"]),
            acceptance_radius=agent["acceptance_radius"],
        )
