"""Run configuration: strict JSON with defaults, echoed after resolution.

Unknown keys are rejected everywhere so a typo cannot silently fall
back to a default, and all referenced input files must exist at load
time. The fully resolved configuration is written next to every run's
outputs and reproduces the run byte for byte when reloaded.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .guidance import GuidanceSchedule

DEFAULTS = {
    "camera": {"fov_h_deg": 55.0, "width": 128, "height": 128},
    "transform": {
        "axis": [0.0, 1.0, 0.0],
        "angle_deg": 0.0,
        "translation": [0.0, 0.0, 0.0],
        "pivot": "centroid",
    },
    "schedule": {
        "total_steps": 50,
        "cutoff_step": 38,
        "layer_cycle": [[3], [2], [2, 3]],
        "w_obj": 1.0,
        "w_bg": 1.0,
        "lambda": 1.0,
        "mu": 0.0,
        "grad_descent_steps": 3,
    },
    "flags": {
        "depth_convention": "z",
        "guidance_mode": "nudge",
        "bg_energy": "per-channel",
        "splat_footprint": True,
        "validity_erosion": 0,
        "disocclusion_threshold": 0.3,
    },
    "engine": {"gamma": 0.3, "canonical_res": 64},
    "paths": {
        "depth": None,
        "image": None,
        "mask": None,
        "background_depth": None,
        "output_dir": None,
    },
    "seed": 0,
}

_REQUIRED_FILES = ("depth", "image", "mask")


@dataclass
class EditConfig:
    camera: dict
    transform: dict
    schedule: dict
    flags: dict
    engine: dict
    paths: dict
    seed: int

    def guidance_schedule(self) -> GuidanceSchedule:
        s = self.schedule
        return GuidanceSchedule(
            total_steps=s["total_steps"],
            cutoff_step=s["cutoff_step"],
            layer_cycle=tuple(tuple(p) for p in s["layer_cycle"]),
            w_obj=s["w_obj"],
            w_bg=s["w_bg"],
            energy_step_size=s["lambda"],
            cfg_scale=s["mu"],
            grad_descent_steps=s["grad_descent_steps"],
        )

    def to_dict(self) -> dict:
        return {
            "camera": copy.deepcopy(self.camera),
            "transform": copy.deepcopy(self.transform),
            "schedule": copy.deepcopy(self.schedule),
            "flags": copy.deepcopy(self.flags),
            "engine": copy.deepcopy(self.engine),
            "paths": copy.deepcopy(self.paths),
            "seed": self.seed,
        }


def _merge_strict(defaults, values, path):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    unknown = set(values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under {path or '<root>'}")
    merged = {}
    for key, default in defaults.items():
        if key in values and isinstance(default, dict):
            merged[key] = _merge_strict(default, values[key], f"{path}{key}.")
        elif key in values:
            merged[key] = copy.deepcopy(values[key])
        else:
            merged[key] = copy.deepcopy(default)
    return merged


def from_dict(data: dict, base_dir: Path | None = None, *,
              check_files: bool = True) -> EditConfig:
    merged = _merge_strict(DEFAULTS, data, "")
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    paths = merged["paths"]
    for key, value in list(paths.items()):
        if value is None:
            continue
        p = Path(value)
        if not p.is_absolute():
            p = base / p
        paths[key] = str(p)
    if check_files:
        for key in _REQUIRED_FILES + ("background_depth",):
            value = paths.get(key)
            if value is None:
                if key in _REQUIRED_FILES:
                    raise ConfigError(f"config paths.{key} is required")
                continue
            if not Path(value).is_file():
                raise ConfigError(f"config paths.{key} refers to a missing file: {value}")
    return EditConfig(
        camera=merged["camera"],
        transform=merged["transform"],
        schedule=merged["schedule"],
        flags=merged["flags"],
        engine=merged["engine"],
        paths=merged["paths"],
        seed=int(merged["seed"]),
    )


def load_config(path, *, check_files: bool = True) -> EditConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(data, base_dir=path.parent, check_files=check_files)


def apply_overrides(cfg: EditConfig, overrides: list[str], *,
                    check_files: bool = True) -> EditConfig:
    """Apply ``section.key=value`` overrides (values parsed as JSON)."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = data
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            node[keys[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[keys[-1]] = raw  # bare strings are allowed unquoted
    return from_dict(data, base_dir=Path.cwd(), check_files=check_files)


def write_resolved(cfg: EditConfig, out_path) -> None:
    Path(out_path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
