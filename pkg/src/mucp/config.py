"""Experiment configuration: flat ``key = value`` text with dotted sections.

Every key has a default matching the tiny desk-scale recipe; unknown keys
are rejected. Flat keys keep recipe-grid sweeps diffable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import SynthSpec
from .model import ModelSpec, TowerSpec
from .moe import PLACEMENT_ALTERNATING, MoESpec
from .train import TrainConfig


class ConfigError(ValueError):
    """Configuration text violates the schema."""


# The tiny recipe: 2-layer dim-64 towers, 32x32 images, 16-class synthetic
# data, 2k dense steps. Upcycle fine-tuning runs at lr/10 and wd/4.
DEFAULTS = {
    "model.backbone_mode": "separated",
    "model.image.num_layers": 2,
    "model.image.model_dim": 64,
    "model.image.num_heads": 4,
    "model.image.mlp_hidden_dim": 256,
    "model.text.num_layers": 2,
    "model.text.model_dim": 64,
    "model.text.num_heads": 4,
    "model.text.mlp_hidden_dim": 256,
    "model.text.max_tokens": 16,
    "model.patch_size": 8,
    "model.image_size": 32,
    "model.vocab_size": 64,
    "model.embed_dim": 32,
    "model.moe_modality": "both",
    "model.temperature_init": 0.5,
    "moe.num_experts": 8,
    "moe.top_k": 2,
    "moe.capacity_factor_image": 2.0,
    "moe.capacity_factor_text": 2.0,
    "moe.balance_weight": 0.01,
    "moe.router_z_weight": 0.001,
    "moe.normalize_gates_after_routing": False,
    "moe.placement": PLACEMENT_ALTERNATING,
    "train.steps": 2000,
    "train.batch_size": 64,
    "train.peak_lr": 1e-3,
    "train.warmup_steps": 100,
    "train.weight_decay": 0.2,
    "train.adam_beta1": 0.9,
    "train.adam_beta2": 0.98,
    "train.grad_clip": 1.0,
    "train.seed": 0,
    "train.checkpoint_every": 0,
    "train.upcycle_steps": 1000,
    "train.upcycle_peak_lr": 1e-4,
    "train.upcycle_weight_decay": 0.05,
    "data.num_shapes": 4,
    "data.num_colors": 4,
    "data.train_size": 512,
    "data.val_size": 64,
    "data.seed": 0,
    "output_dir": "out",
}


def _coerce(key: str, text: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if text not in ("true", "false"):
            raise ConfigError(f"{key}: expected true/false, got {text!r}")
        return text == "true"
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return text


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = key.strip(), value.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            cfg.values[key] = _coerce(key, value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_text(f.read())

    def to_text(self) -> str:
        return "\n".join(f"{k} = {_fmt(self.values[k])}" for k in DEFAULTS) + "\n"

    # -- section builders ---------------------------------------------------

    def _tower(self, prefix: str, max_tokens: int) -> TowerSpec:
        return TowerSpec(
            num_layers=self[f"{prefix}.num_layers"],
            model_dim=self[f"{prefix}.model_dim"],
            num_heads=self[f"{prefix}.num_heads"],
            mlp_hidden_dim=self[f"{prefix}.mlp_hidden_dim"],
            max_tokens=max_tokens,
        )

    def moe_spec(self) -> MoESpec:
        spec = MoESpec(
            num_experts=self["moe.num_experts"],
            top_k=self["moe.top_k"],
            capacity_factor_image=self["moe.capacity_factor_image"],
            capacity_factor_text=self["moe.capacity_factor_text"],
            balance_weight=self["moe.balance_weight"],
            router_z_weight=self["moe.router_z_weight"],
            normalize_gates_after_routing=self["moe.normalize_gates_after_routing"],
            placement=self["moe.placement"],
        )
        spec.validate()
        return spec

    def model_spec(self, with_moe: bool) -> ModelSpec:
        image_tokens = (self["model.image_size"] // self["model.patch_size"]) ** 2 + 1
        spec = ModelSpec(
            backbone_mode=self["model.backbone_mode"],
            image_tower=self._tower("model.image", image_tokens),
            text_tower=self._tower("model.text", self["model.text.max_tokens"]),
            patch_size=self["model.patch_size"],
            image_size=self["model.image_size"],
            vocab_size=self["model.vocab_size"],
            embed_dim=self["model.embed_dim"],
            moe=self.moe_spec() if with_moe else None,
            moe_modality=self["model.moe_modality"],
            temperature_init=self["model.temperature_init"],
        )
        try:
            spec.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        return spec

    def train_config(self, regime: str) -> TrainConfig:
        upcycling = regime == "upcycle"
        cfg = TrainConfig(
            steps=self["train.upcycle_steps"] if upcycling else self["train.steps"],
            batch_size=self["train.batch_size"],
            peak_lr=self["train.upcycle_peak_lr"] if upcycling else self["train.peak_lr"],
            warmup_steps=self["train.warmup_steps"],
            weight_decay=(
                self["train.upcycle_weight_decay"] if upcycling else self["train.weight_decay"]
            ),
            adam_beta1=self["train.adam_beta1"],
            adam_beta2=self["train.adam_beta2"],
            seed=self["train.seed"],
            regime=regime,
            grad_clip=self["train.grad_clip"],
            checkpoint_every=self["train.checkpoint_every"],
        )
        try:
            cfg.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        return cfg

    def synth_spec(self) -> SynthSpec:
        spec = SynthSpec(
            num_shapes=self["data.num_shapes"],
            num_colors=self["data.num_colors"],
            image_size=self["model.image_size"],
            max_tokens=self["model.text.max_tokens"],
            train_size=self["data.train_size"],
            val_size=self["data.val_size"],
            seed=self["data.seed"],
        )
        try:
            spec.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        return spec

    @property
    def output_dir(self) -> str:
        return self["output_dir"]
