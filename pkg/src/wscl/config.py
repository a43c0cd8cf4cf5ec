"""Flat key=value run configuration: parsing, defaults, and hashing."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .data import AugmentConfig
from .exceptions import ConfigurationError
from .learners import METHODS, LearnerConfig

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


@dataclass
class RunConfig:
    """Everything needed to reproduce one experiment cell (modulo seed)."""

    # dataset
    dataset: str = "blobs"        # blobs | digits | file:<path>
    dim: int = 16
    classes: int = 10
    train_per_class: int = 500
    test_per_class: int = 200
    separation: float = 2.5
    modes_per_class: int = 2
    data_seed: int = 0
    # stream
    tasks: int = 5
    p_s: float = 0.25
    batch_size: int = 32
    epochs: int = 10
    val_fraction: float = 0.0
    # learner
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    # experiment
    seeds: tuple = (0, 1, 2, 3, 4)
    out_dir: str = "runs"

    def canonical_text(self):
        pairs = []
        for key, value in sorted(self.as_flat_dict().items()):
            pairs.append(f"{key}={value}")
        return "\n".join(pairs)

    def config_hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def as_flat_dict(self):
        out = {}
        for f in fields(self):
            if f.name == "learner":
                continue
            value = getattr(self, f.name)
            if f.name == "seeds":
                value = ",".join(str(s) for s in value)
            out[f.name] = value
        lc = self.learner
        for f in fields(LearnerConfig):
            if f.name == "augment":
                continue
            out[f.name] = getattr(lc, f.name)
        out["jitter_sigma"] = lc.augment.jitter_sigma
        out["crop_pad"] = lc.augment.crop_pad
        out["flip"] = lc.augment.flip
        return out


_RUN_KEYS = {
    "dataset": str, "dim": int, "classes": int, "train_per_class": int,
    "test_per_class": int, "separation": float, "modes_per_class": int,
    "data_seed": int, "tasks": int, "p_s": float, "batch_size": int,
    "epochs": int, "val_fraction": float, "out_dir": str,
}
_LEARNER_KEYS = {
    "method": str, "buffer_size": int, "lr": float, "optimizer": str,
    "replay_size": int, "lam": float, "mu": float, "alpha": float,
    "beta": float, "tau": float, "eta": float, "n_aug": int, "gamma": float,
    "knn_k": int, "mining": str, "embedding": str,
    "use_mixup": bool, "use_sharpen": bool, "use_unsup_loss": bool,
    "use_knn": bool, "use_sup_mining": bool, "use_unsup_mining": bool,
}
_AUGMENT_KEYS = {"jitter_sigma": float, "crop_pad": int, "flip": bool}


def _convert(key, raw, typ):
    if typ is bool:
        try:
            return _BOOL[raw.strip().lower()]
        except KeyError:
            raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: expected {typ.__name__}, got {raw!r}")


def apply_setting(config, key, raw):
    """Set one key=value pair on a RunConfig; raises on unknown keys."""
    if key == "seeds":
        config.seeds = tuple(int(s) for s in raw.split(",") if s.strip())
        return
    if key in _RUN_KEYS:
        setattr(config, key, _convert(key, raw, _RUN_KEYS[key]))
        return
    if key in _LEARNER_KEYS:
        setattr(config.learner, key, _convert(key, raw, _LEARNER_KEYS[key]))
        return
    if key in _AUGMENT_KEYS:
        setattr(config.learner.augment, key, _convert(key, raw, _AUGMENT_KEYS[key]))
        return
    raise ConfigurationError(f"unknown configuration key {key!r}")


def parse_config_lines(lines, config=None):
    config = config or RunConfig(learner=LearnerConfig(augment=AugmentConfig()))
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        apply_setting(config, key, raw)
    _validate(config)
    return config


def load_config(path):
    with open(path) as fh:
        return parse_config_lines(fh)


def parse_grid_lines(lines):
    """Grid file: each line key=v1,v2,... ; returns {key: [raw values]}."""
    grid = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=v1,v2,...")
        key, raw = (part.strip() for part in line.split("=", 1))
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigurationError(f"line {lineno}: empty value list for {key}")
        grid[key] = values
    if not grid:
        raise ConfigurationError("empty grid")
    return grid


def load_grid(path):
    with open(path) as fh:
        return parse_grid_lines(fh)


def _validate(config):
    if config.learner.method not in METHODS:
        raise ConfigurationError(f"unknown method {config.learner.method!r}")
    if not (0.0 < config.p_s <= 1.0):
        raise ConfigurationError(f"p_s must be in (0, 1], got {config.p_s}")
    if config.tasks < 1:
        raise ConfigurationError("need at least one task")
