"""Run configuration: one JSON document covering every subsystem.

A config file deep-merges over the documented defaults; any field can also
be overridden from the command line with ``--set section.key=value`` (values
parse as JSON, falling back to plain strings). The fully resolved document
is written into every run's output directory so the run can be reproduced
from that snapshot alone.
"""

from __future__ import annotations

import copy
import json
import os

from .attacks import AttackConfig, EVAL_PGD20, SEARCH_ATTACK, TRAIN_ATTACK
from .data import DatasetSpec
from .genotypes import SupernetConfig
from .search import SearchSchedule
from .train import TrainConfig


class ConfigError(Exception):
    """Raised for unreadable, unknown, or inconsistent configuration."""


def default_config() -> dict:
    """Desk-scale defaults; paper-scale values fit the same schema."""
    return {
        "seed": 0,
        "output_dir": "runs/out",
        "dataset": DatasetSpec().to_dict(),
        "supernet": SupernetConfig(
            total_cells=4, init_channels=8, image_size=16, class_count=2,
        ).to_dict(),
        "search": SearchSchedule(
            epochs=12, first_stage_epochs=8, batch_size=32,
            precision="float32",
            attack=SEARCH_ATTACK,
        ).to_dict(),
        "train": TrainConfig(
            epochs=20, batch_size=32, lr=0.05, decay_epochs=(10, 15),
            attack=TRAIN_ATTACK,
        ).to_dict(),
        "attack": TRAIN_ATTACK.to_dict(),
        "eval": {"attacks": [
            AttackConfig(kind="fgsm", epsilon=8 / 255, step_size=8 / 255,
                         steps=1).to_dict(),
            TRAIN_ATTACK.to_dict(),
            EVAL_PGD20.to_dict(),
        ]},
        "precision": "float32",
    }


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None) -> dict:
    """Defaults, overlaid with the JSON file at ``path`` when given."""
    cfg = default_config()
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} does not exist")
    try:
        with open(path) as f:
            user = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path!r} is not valid JSON: {e}") from e
    if not isinstance(user, dict):
        raise ConfigError(f"config file {path!r} must hold a JSON object")
    return _deep_merge(cfg, user)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply dotted ``section.key=value`` assignments."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config field {key!r}")
        node[parts[-1]] = value
    return cfg


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def _seeded(d: dict, seed: int) -> dict:
    d = dict(d)
    d["rng_seed"] = seed
    return d


def dataset_spec_from(cfg: dict) -> DatasetSpec:
    try:
        return DatasetSpec.from_dict(_seeded(cfg["dataset"],
                                             int(cfg["seed"])))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad dataset config: {e}") from e


def supernet_config_from(cfg: dict) -> SupernetConfig:
    try:
        return SupernetConfig.from_dict(cfg["supernet"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad supernet config: {e}") from e


def schedule_from(cfg: dict) -> SearchSchedule:
    try:
        section = _seeded(cfg["search"], int(cfg["seed"]))
        section.setdefault("precision", cfg.get("precision", "float64"))
        return SearchSchedule.from_dict(section)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad search config: {e}") from e


def train_config_from(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(_seeded(cfg["train"], int(cfg["seed"])))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad train config: {e}") from e


def attack_config_from(cfg: dict) -> AttackConfig:
    try:
        return AttackConfig.from_dict(_seeded(cfg["attack"],
                                              int(cfg["seed"])))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad attack config: {e}") from e


def eval_attacks_from(cfg: dict) -> list[AttackConfig]:
    try:
        return [AttackConfig.from_dict(_seeded(a, int(cfg["seed"])))
                for a in cfg["eval"]["attacks"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad eval config: {e}") from e
