"""Run configuration: one JSON document describing model, training, data
and loss choices.

Resolution fills every default and rejects unknown keys by their dotted
path, so a typo'd hyperparameter fails loudly instead of training with the
default. The resolved echo is itself a valid config that reproduces the
run.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import InfoNCEConfig
from .model import ModelConfig
from .trainer import TrainConfig

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"targets", "infonce"}
_INFONCE_KEYS = {f.name for f in fields(InfoNCEConfig)}
_LOSS_KEYS = {"targets", "weights", "infonce"}
_SECTIONS = ("model", "train", "data", "loss")


@dataclass
class DataConfig:
    manifest: str
    out_dir: str


@dataclass
class RunConfig:
    """A fully resolved run; `resolved` is the JSON-ready echo."""

    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    resolved: dict


def _reject_unknown(section: dict, allowed: set[str], prefix: str) -> None:
    for key in section:
        if key not in allowed:
            raise ValueError(f"unknown config key {prefix}{key!r}")


def _require_section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ValueError(f"config section {name!r} must be an object")
    return value


def resolve_run_config(raw: dict, env: dict | None = None) -> RunConfig:
    """Validate a raw config dict, fill defaults, apply the env seed override."""
    if env is None:
        env = dict(os.environ)
    if not isinstance(raw, dict):
        raise ValueError("run config must be a JSON object")
    _reject_unknown(raw, set(_SECTIONS), "")

    model_sec = _require_section(raw, "model")
    _reject_unknown(model_sec, _MODEL_KEYS, "model.")
    model = ModelConfig.from_dict(model_sec)

    train_sec = _require_section(raw, "train")
    _reject_unknown(train_sec, _TRAIN_KEYS, "train.")

    loss_sec = _require_section(raw, "loss")
    _reject_unknown(loss_sec, _LOSS_KEYS, "loss.")
    targets = list(loss_sec.get("targets", []))
    weights = dict(loss_sec.get("weights", {}))
    unknown_weights = set(weights) - set(targets)
    if unknown_weights:
        raise ValueError(
            f"loss.weights names targets not in loss.targets: {sorted(unknown_weights)}")
    infonce_sec = dict(loss_sec.get("infonce", {}))
    _reject_unknown(infonce_sec, _INFONCE_KEYS, "loss.infonce.")
    infonce = InfoNCEConfig(**infonce_sec)

    data_sec = _require_section(raw, "data")
    _reject_unknown(data_sec, {"manifest", "out_dir"}, "data.")
    for key in ("manifest", "out_dir"):
        if key not in data_sec:
            raise ValueError(f"missing required key 'data.{key}'")
    data = DataConfig(manifest=str(data_sec["manifest"]), out_dir=str(data_sec["out_dir"]))

    train_kwargs = dict(train_sec)
    if "CTXSEP_SEED" in env:
        try:
            train_kwargs["seed"] = int(env["CTXSEP_SEED"])
        except ValueError:
            raise ValueError(f"CTXSEP_SEED must be an integer, got {env['CTXSEP_SEED']!r}")
    train = TrainConfig(
        targets={name: float(weights.get(name, 1.0)) for name in targets},
        infonce=infonce, **train_kwargs)

    return RunConfig(model=model, train=train, data=data,
                     resolved=run_dict(model, train, data))


def run_dict(model: ModelConfig, train: TrainConfig, data: DataConfig) -> dict:
    """The canonical resolved-config echo."""
    train_d = train.to_dict()
    infonce = train_d.pop("infonce")
    train_d.pop("targets")
    return {
        "model": model.to_dict(),
        "train": train_d,
        "data": {"manifest": data.manifest, "out_dir": data.out_dir},
        "loss": {"targets": sorted(train.targets),
                 "weights": {k: train.targets[k] for k in sorted(train.targets)},
                 "infonce": infonce},
    }


def load_run_config(path: str | Path, env: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    return resolve_run_config(raw, env=env)
