"""Run configuration: INI-style ``key = value`` files with sections.

Sections: ``[model]``, ``[env]``, ``[train]``, ``[eval]``. Unknown keys are an
error. ``profile = paper-faithful`` pins the large model dimensions.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .nn import ConfigError, config_hash


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    text_layers: int = 2
    ope_layers: int = 2
    mam_layers: int = 4
    ccm_layers: int = 1
    mlm_layers: int = 2
    raw_dim: int = 64
    vocab_size: int = 38
    max_positions: int = 256
    ccm_mode: str = "compare"  # compare | independent
    dropout: float = 0.0

    def validate(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 2:
            raise ConfigError("d must be even for sinusoidal positions")
        if self.ccm_mode not in ("compare", "independent"):
            raise ConfigError(f"unknown ccm_mode {self.ccm_mode!r}")
        if self.dropout != 0.0:
            raise ConfigError("dropout is not implemented; keep it at 0.0")
        return self


@dataclass
class EnvConfig:
    n_nodes: int = 25
    layout: str = "grid"
    spacing: float = 2.0
    landmark_count: int = 24
    stair_rise: float = 0.0
    k_heading: int = 12
    k_elevation: int = 1
    min_len: int = 2
    max_len: int = 5
    fidelity: str = "shortest"
    train_envs: int = 200
    eval_envs: int = 40


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch: int = 8
    iterations: int = 400
    train_episodes: int = 2000
    lam: float = 0.2
    pretrain_steps: int = 300
    pretrain_batch: int = 8
    pretrain_lr: float = 1e-3
    mask_rate: float = 0.15
    pseudo_metric: str = "metric"  # metric | hops
    eval_every: int = 50  # held-out probe interval during fine-tuning; 0 disables


@dataclass
class EvalConfig:
    episodes: int = 200
    success_radius: float = 0.0  # 0 -> 1.5 x spacing
    step_budget: int = 0  # 0 -> 2 * |gt_path| + 6


@dataclass
class Config:
    profile: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def as_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        return config_hash(self.as_dict())

    @classmethod
    def from_dict(cls, data):
        try:
            parts = {name: kind(**data[name]) for name, kind in _SECTIONS.items()}
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed config record: {exc}") from None
        cfg = cls(profile=data.get("profile", "desk"), **parts)
        cfg.model.validate()
        return cfg

    def apply_profile(self, profile=None):
        if profile is not None:
            self.profile = profile
        if self.profile == "paper-faithful":
            m = self.model
            m.d, m.heads, m.text_layers = 768, 12, 6
            m.ope_layers, m.mam_layers, m.ccm_layers = 2, 4, 1
            m.raw_dim = 768
            self.env.k_heading, self.env.k_elevation = 12, 3
        elif self.profile != "desk":
            raise ConfigError(f"unknown profile {self.profile!r}")
        self.model.validate()
        return self


_SECTIONS = {"model": ModelConfig, "env": EnvConfig, "train": TrainConfig, "eval": EvalConfig}


def _coerce(kind, raw, key):
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def load_config(path=None, profile=None):
    cfg = Config()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            if section == "run":
                for key, raw in parser.items(section):
                    if key != "profile":
                        raise ConfigError(f"unknown key run.{key}")
                    cfg.profile = raw
                continue
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            target = getattr(cfg, section)
            types = {f.name: type(getattr(target, f.name)) for f in dataclasses.fields(target)}
            for key, raw in parser.items(section):
                if key not in types:
                    raise ConfigError(f"unknown key {section}.{key}")
                setattr(target, key, _coerce(types[key], raw, f"{section}.{key}"))
    return cfg.apply_profile(profile)
