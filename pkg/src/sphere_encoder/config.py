"""Flat YAML run configuration.

Key names mirror the training-hyperparameter table of the method (``batch_size``,
``min_lr``, ``angle_jitter_range`` ...). Unknown keys are errors. Command-line
overrides are applied on top of file values before validation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import DatasetSpec
from .exceptions import ConfigError
from .geometry import NoisePolicy
from .losses import LossWeights
from .network import ModelConfig
from .sampling import SamplerPlan
from .training import TrainConfig

# key -> (section, field, default); section None marks descriptive or derived keys
_SCHEMA: dict[str, tuple] = {
    # model
    "model": (None, None, "sphere-toy"),
    "encoder_decoder_size": (None, None, "toy"),
    "image_size": ("model", "image_size", 24),
    "channels": ("model", "channels", 3),
    "patch_size": ("model", "patch_size", 3),
    "number_of_transformer_blocks": ("model", "n_blocks", 4),
    "number_of_attention_heads": ("model", "n_heads", 4),
    "transformer_hidden_size": ("model", "hidden_size", 64),
    "mlp_mixer_depth": ("model", "mixer_depth", 2),
    "latent_channels": ("model", "latent_channels", 18),
    "class_condition": (None, None, True),
    "cfg_null_probability": ("model", "cfg_null_drop_prob", 0.1),
    "mlp_ratio": ("model", "mlp_ratio", 4.0),
    "rope_theta": ("model", "rope_theta", 100.0),
    "latent_dim": (None, None, None),
    "volume_compression_ratio": (None, None, None),
    "model_params": (None, None, None),
    # optimization
    "batch_size": ("train", "batch_size", 32),
    "learning_rate": ("train", "learning_rate", 1e-3),
    "lr_decay_schedule": (None, None, "cosine"),
    "min_lr": ("train", "min_learning_rate", 1e-6),
    "weight_decay": ("train", "weight_decay", 0.0),
    "optimizer": (None, None, "adamw"),
    "adam_beta1": (None, None, 0.9),
    "adam_beta2": (None, None, 0.999),
    "adam_eps": ("train", "eps", 1e-8),
    "grad_clip_norm": ("train", "grad_clip", 1.0),
    "warmup_epochs": ("train", "warmup_epochs", 1),
    "total_epochs": ("train", "total_epochs", 80),
    "max_steps": ("train", "max_steps", None),
    "checkpoint_every": ("train", "checkpoint_every", 0),
    "seed": ("train", "seed", 0),
    "perceptual_seed": ("train", "perceptual_seed", 0),
    # noise
    "noise_jitter_mode": ("noise", "mode", "angle-uniform"),
    "angle_jitter_range": ("noise", "base_angle_range", [0.0, 80.0]),
    "angle_mix_range": ("noise", "mix_angle_range", [80.0, 85.0]),
    "angle_mix_probability": ("noise", "mix_probability", 0.1),
    "sigma_max": ("noise", "sigma_max_value", None),
    # losses
    "pix_recon_smooth_l1_loss_weight": ("loss", "pix_recon_l1", 1.0),
    "pix_recon_perceptual_loss_weight": ("loss", "pix_recon_perceptual", 1.0),
    "pix_con_smooth_l1_loss_weight": ("loss", "pix_con_l1", 0.5),
    "pix_con_perceptual_loss_weight": ("loss", "pix_con_perceptual", 0.5),
    "lat_con_loss_weight": ("loss", "lat_con", 0.1),
    # sampling
    "sample_steps": ("sampler", "steps", 1),
    "sample_gamma": ("sampler", "gamma", 0.0),
    "share_noise": ("sampler", "share_noise", True),
    "cfg_scale": ("sampler", "cfg_scale", 1.0),
    "cfg_position": ("sampler", "cfg_position", "none"),
    "noise_truncation": ("sampler", "truncation", None),
    "sample_r": ("sampler", "r_override", None),
    # data
    "dataset_source": ("data", "source", "synthetic"),
    "dataset_path": ("data", "path", None),
    "dataset_classes": ("data", "classes", ["circle", "square", "triangle"]),
    "n_per_class": ("data", "n_per_class", 200),
    "flip_probability": ("data", "flip_prob", 0.5),
    "center_crop": ("data", "center_crop", True),
    "dataset_seed": ("data", "seed", 0),
    "holdout_fraction": (None, None, 0.0),
    # paths
    "output_dir": (None, None, None),
    "resume_from": (None, None, None),
}

REQUIRED = (
    "image_size", "batch_size", "learning_rate", "min_lr", "warmup_epochs", "total_epochs",
    "transformer_hidden_size", "number_of_transformer_blocks", "number_of_attention_heads",
    "mlp_mixer_depth", "angle_jitter_range",
)

KEYS = tuple(_SCHEMA)


def _tuple(v):
    return tuple(v) if isinstance(v, (list, tuple)) else v


def parse_latent_dim(text: str) -> tuple:
    """``"8x8x18"`` or ``"16^2x8"`` -> ``(h, w, d)``."""
    parts = str(text).replace("×", "x").replace(" ", "").split("x")
    dims = []
    for p in parts:
        if "^2" in p:
            base = int(p.replace("^2", ""))
            dims += [base, base]
        else:
            dims.append(int(p))
    if len(dims) != 3:
        raise ConfigError(f"latent_dim {text!r} must describe h x w x d")
    return tuple(dims)


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    noise: NoisePolicy
    loss: LossWeights
    sampler: SamplerPlan
    data: DatasetSpec
    output_dir: Optional[str] = None
    resume_from: Optional[str] = None
    holdout_fraction: float = 0.0
    labels: dict = field(default_factory=dict)

    @classmethod
    def from_flat(cls, flat: dict, require: bool = True) -> "RunConfig":
        unknown = sorted(set(flat) - set(_SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        if require:
            missing = [k for k in REQUIRED if k not in flat]
            if missing:
                raise ConfigError(f"missing required config field(s): {', '.join(missing)}")
        values = {k: flat.get(k, default) for k, (_, _, default) in _SCHEMA.items()}
        sections: dict[str, dict[str, Any]] = {s: {} for s in ("model", "train", "noise", "loss", "sampler", "data")}
        for key, (section, name, _) in _SCHEMA.items():
            if section is not None:
                sections[section][name] = _tuple(values[key])

        if values["lr_decay_schedule"] != "cosine":
            raise ConfigError("lr_decay_schedule: only 'cosine' is supported")
        if str(values["optimizer"]).lower() != "adamw":
            raise ConfigError("optimizer: only 'adamw' is supported")
        sections["train"]["betas"] = (float(values["adam_beta1"]), float(values["adam_beta2"]))

        classes = tuple(values["dataset_classes"] or ())
        conditional = bool(values["class_condition"])
        sections["model"]["n_classes"] = len(classes) if conditional else 0
        sections["data"]["classes"] = classes
        sections["data"]["image_size"] = values["image_size"]
        sections["data"]["channels"] = values["channels"]
        if sections["noise"]["mode"] == "sigma-uniform" and sections["noise"]["sigma_max_value"] is None:
            raise ConfigError("sigma_max is required when noise_jitter_mode is sigma-uniform")

        def build(name, ctor):
            try:
                return ctor(**sections[name])
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name} settings: {exc}") from exc

        model = build("model", ModelConfig)
        if values["latent_dim"] is not None and parse_latent_dim(values["latent_dim"]) != model.latent_shape:
            raise ConfigError(f"latent_dim {values['latent_dim']} does not match patch_size/latent_channels "
                              f"(gives {model.latent_shape})")
        ratio = values["volume_compression_ratio"]
        if ratio is not None and not math.isclose(float(ratio), model.compression_ratio, rel_tol=1e-6):
            raise ConfigError(f"volume_compression_ratio {ratio} does not match the model ({model.compression_ratio})")
        return cls(
            model=model,
            train=build("train", TrainConfig),
            noise=build("noise", NoisePolicy),
            loss=build("loss", LossWeights),
            sampler=build("sampler", SamplerPlan),
            data=build("data", DatasetSpec),
            output_dir=values["output_dir"],
            resume_from=values["resume_from"],
            holdout_fraction=float(values["holdout_fraction"]),
            labels={k: values[k] for k in ("model", "encoder_decoder_size")},
        )

    def to_flat(self) -> dict:
        sections = {
            "model": asdict(self.model), "train": asdict(self.train), "noise": asdict(self.noise),
            "loss": asdict(self.loss), "sampler": asdict(self.sampler), "data": asdict(self.data),
        }
        out = {}
        for key, (section, name, _) in _SCHEMA.items():
            if section is not None:
                v = sections[section][name]
                out[key] = list(v) if isinstance(v, tuple) else v
        out.update(self.labels)
        out["class_condition"] = self.model.conditional
        out["lr_decay_schedule"] = "cosine"
        out["optimizer"] = "adamw"
        out["adam_beta1"], out["adam_beta2"] = (float(b) for b in self.train.betas)
        h, w, d = self.model.latent_shape
        out["latent_dim"] = f"{h}x{w}x{d}"
        out["volume_compression_ratio"] = self.model.compression_ratio
        out["model_params"] = None
        out["holdout_fraction"] = self.holdout_fraction
        out["output_dir"] = self.output_dir
        out["resume_from"] = self.resume_from
        return out


def coerce(key: str, text: str):
    """Parse a command-line override value with YAML scalar rules."""
    if key not in _SCHEMA:
        raise ConfigError(f"unknown config key: {key}")
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key}: {text!r}") from exc


def load_flat(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a flat mapping")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; nested keys: {nested}")
    return data


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    flat = load_flat(path)
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)


def dump_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_flat(), sort_keys=False))
