"""Experiment configuration: named presets plus JSON overrides."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .model import ModelConfig
from .sim import WorldConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "DOANAV_OUTPUT_ROOT"
# model fields that must mirror the world's observation layout
MIRRORED = {"n_classes": "num_classes", "m_cells": "m_cells", "d_img": "d_img", "d_vis": "d_vis"}


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass
class EvalConfig:
    n_episodes: int = 64  # per seed
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    held_out_world_seeds: list = field(default_factory=lambda: list(range(20_000, 20_016)))
    greedy: bool = False

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("eval.seeds must be nonempty")
        if not self.held_out_world_seeds:
            raise ConfigError("eval.held_out_world_seeds must be nonempty")
        if self.n_episodes < 0:
            raise ConfigError("eval.n_episodes must be >= 0")


PRESETS = {
    "desk": {
        "world": {"num_classes": 8, "d_img": 32, "d_vis": 32, "m_cells": 16},
        "model": {"head_dim": 64, "n_heads": 4, "conf_threshold": 0.6, "dropout_rate": 0.3},
        "train": {"lr": 1e-4},
        "eval": {},
    },
    "paper": {
        "world": {"num_classes": 22, "d_img": 512, "d_vis": 512, "m_cells": 49},
        "model": {"head_dim": 64, "n_heads": 4, "conf_threshold": 0.6, "dropout_rate": 0.3},
        "train": {"lr": 1e-4, "workers": 18, "total_episodes": 3_000_000},
        "eval": {},
    },
    # 3x3 single-target sanity task: the target is never out of view
    "trivial": {
        "world": {"grid_w": 3, "grid_h": 3, "num_classes": 8, "d_img": 32, "d_vis": 32, "m_cells": 16,
                  "obstacle_density": 0.0, "fov_deg": 360.0, "height_bands": False, "n_clusters": 1,
                  "cluster_size": [4, 4], "min_classes": 4},
        "model": {"head_dim": 64, "n_heads": 4, "conf_threshold": 0.6, "dropout_rate": 0.3},
        "train": {"lr": 1e-4, "workers": 1, "rollout_len": 1, "total_episodes": 2000, "targets": [0],
                  "train_world_seeds": list(range(32)), "val_world_seeds": list(range(32)),
                  "val_every": 500, "val_episodes": 100},
        "eval": {"held_out_world_seeds": list(range(32)), "n_episodes": 300, "seeds": [99]},
    },
}


@dataclass
class ExperimentConfig:
    world: WorldConfig
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    output_dir: str = "runs/default"
    preset: str = "desk"

    def validate(self) -> None:
        try:
            self.world.validate()
            self.model.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.eval.validate()
        for m, w in MIRRORED.items():
            if getattr(self.model, m) != getattr(self.world, w):
                raise ConfigError(f"model.{m}={getattr(self.model, m)} disagrees with world.{w}")

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "world": self.world.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
            "output_dir": self.output_dir,
        }

    def resolved_output_dir(self) -> Path:
        """Output directory, re-rooted under $DOANAV_OUTPUT_ROOT when that is set."""
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            return Path(root) / (out.name if out.is_absolute() else out)
        return out

    def with_model(self, **toggles) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        for k, v in toggles.items():
            if k not in ModelConfig.__dataclass_fields__:
                raise ConfigError(f"unknown model field {k!r}")
            setattr(cfg.model, k, v)
        cfg.validate()
        return cfg


def _section(cls, data: dict, name: str):
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - {"preset", "world", "model", "train", "eval", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    preset = d.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]
    sections = {}
    for name in ("world", "model", "train", "eval"):
        over = d.get(name, {})
        if not isinstance(over, dict):
            raise ConfigError(f"section {name!r} must be an object")
        sections[name] = {**copy.deepcopy(base[name]), **over}
    world = _section(WorldConfig, sections["world"], "world")
    model_d = sections["model"]
    for m, w in MIRRORED.items():
        model_d.setdefault(m, getattr(world, w))
    if "train" in d and "adam_betas" in sections["train"]:
        sections["train"]["adam_betas"] = tuple(sections["train"]["adam_betas"])
    cfg = ExperimentConfig(world, _section(ModelConfig, model_d, "model"),
                           _section(TrainConfig, sections["train"], "train"),
                           _section(EvalConfig, sections["eval"], "eval"),
                           str(d.get("output_dir", f"runs/{preset}")), preset)
    cfg.validate()
    return cfg


def preset(name: str, **sections) -> ExperimentConfig:
    return from_dict({"preset": name, **sections})


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
