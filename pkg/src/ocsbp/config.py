"""Flat JSON run configuration with named presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .icsbp import parse_stop_policy
from .model import PRESETS as MODEL_PRESETS
from .model import ModelConfig
from .training import GOAL_PER_VALUE, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "desk32"
    # model
    image_size: list = field(default_factory=lambda: [32, 32])
    channels: int = 3
    k_train: int = 5
    latent_dim: int = 32
    backbone_widths: list = field(default_factory=lambda: [32, 32, 64])
    backbone_hidden: int = 128
    feature_channels: int = 32
    pooled_channels: int = 64
    embedding_dim: int = 8
    head_width: int = 32
    posterior_hidden: int = 128
    decoder_width: int = 32
    prior_hidden: int = 256
    kernel: str = "gaussian"
    prior: str = "autoregressive"
    groups: int = 8
    # controller
    geco_goal: float = GOAL_PER_VALUE
    geco_alpha: float = 0.99
    geco_eta_up: float = 1e-4
    geco_eta_down: float = 1e-5
    beta_min: float = 1e-10
    beta_init: float | None = None
    use_mask_loss: bool = False
    sigma_x: float = 0.7
    # optimiser
    steps: int = 20000
    batch_size: int = 8
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # run
    eval_policy: str | None = None  # None means fixed:k_train
    seed: int = 0
    split_seed: int = 0
    precision: str = "float32"
    log_every: int = 1
    save_every: int = 2000
    data: str | None = None
    out: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.model_config()
            parse_stop_policy(self.resolved_policy())
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        for key in ("steps", "batch_size", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.save_every < 0 or self.lr <= 0 or self.sigma_x <= 0:
            raise ConfigError("save_every must be >= 0; lr and sigma_x must be positive")

    def resolved_policy(self) -> str:
        return self.eval_policy or f"fixed:{self.k_train}"

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            adam_betas=(self.adam_beta1, self.adam_beta2), adam_eps=self.adam_eps,
            sigma_x=self.sigma_x, geco_goal=self.geco_goal, geco_alpha=self.geco_alpha,
            geco_eta_up=self.geco_eta_up, geco_eta_down=self.geco_eta_down, beta_min=self.beta_min,
            beta_init=self.beta_init, use_mask_loss=self.use_mask_loss, seed=self.seed,
            log_every=self.log_every, save_every=self.save_every)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        name = d.get("preset", "desk32")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        merged = dict(PRESETS[name])
        merged.update(d)
        merged["preset"] = name
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _model_fields(cfg: ModelConfig) -> dict:
    d = cfg.to_dict()
    return {k: v for k, v in d.items()}


PRESETS = {
    "desk32": {**_model_fields(MODEL_PRESETS["desk32"]), "steps": 20000, "batch_size": 8,
               "lr": 1e-3, "beta_init": 0.1, "beta_min": 0.1},
    "smoke": {**_model_fields(MODEL_PRESETS["desk32"]), "steps": 200, "batch_size": 8,
              "lr": 1e-4, "save_every": 100},
    "paper64": {**_model_fields(MODEL_PRESETS["paper64"]), "steps": 500000, "batch_size": 32,
                "lr": 1e-4},
}
