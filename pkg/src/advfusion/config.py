"""Experiment configuration: schema, validation, canonical hashing.

Configs are strict: unknown keys are rejected, out-of-range values name the
offending field by JSON pointer, and defaults are filled in so the validated
config echoes the complete effective settings.
"""

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .archives import canonical_json, sha256_text
from .exceptions import ConfigValidationError
from .models import ARCHITECTURES


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SplitConfig(_StrictModel):
    train: float = Field(default=0.8, ge=0.0, le=1.0)
    val: float = Field(default=0.1, ge=0.0, le=1.0)
    attack: float = Field(default=0.1, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _sums_to_one(self):
        if abs(self.train + self.val + self.attack - 1.0) > 1e-6:
            raise ValueError("train + val + attack must sum to 1")
        return self


class DatasetConfig(_StrictModel):
    path: str
    image_size: int = Field(default=64, ge=16, le=512)
    channels: int = Field(default=3)
    split: SplitConfig = Field(default_factory=SplitConfig)
    attack_count: int = Field(default=50, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be a multiple of 8")
        return self


class ClassifierTrainConfig(_StrictModel):
    epochs: int = Field(default=16, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    accuracy_floor: float = Field(default=0.7, ge=0.0, le=1.0)
    # Warp half the training batches with views from the eot distribution so
    # the models are not blind to scaled and oblique images at evaluation.
    augment_views: bool = True


class ModelsConfig(_StrictModel):
    surrogates: list[str] = Field(default=["cnn_a", "cnn_b"], min_length=1)
    held_out: list[str] = Field(default=["cnn_c"])
    train: ClassifierTrainConfig = Field(default_factory=ClassifierTrainConfig)

    @model_validator(mode="after")
    def _check(self):
        known = set(ARCHITECTURES)
        for mid in self.surrogates + self.held_out:
            if mid not in known:
                raise ValueError(f"unknown model id {mid!r} (known: {', '.join(sorted(known))})")
        overlap = set(self.surrogates) & set(self.held_out)
        if overlap:
            raise ValueError(f"surrogates and held_out overlap: {', '.join(sorted(overlap))}")
        if len(set(self.surrogates)) != len(self.surrogates):
            raise ValueError("surrogates contains duplicates")
        return self


class AutoencoderTrainConfig(_StrictModel):
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=3e-3, gt=0)
    mae_budget: float = Field(default=0.05, gt=0.0, le=1.0)


class AutoencoderConfig(_StrictModel):
    latent_channels: int = Field(default=64, ge=4)
    train: AutoencoderTrainConfig = Field(default_factory=AutoencoderTrainConfig)


class NoiseConfig(_StrictModel):
    epsilon: float = Field(default=8.0 / 255.0, ge=0.0, le=1.0)
    n_samples: int = Field(default=100, ge=1)
    mode: str = Field(default="expectation")

    @model_validator(mode="after")
    def _check(self):
        if self.mode not in ("expectation", "worst_case"):
            raise ValueError("mode must be 'expectation' or 'worst_case'")
        return self


class DisentangleConfig(_StrictModel):
    gamma: float = Field(default=0.8, ge=0.0, le=1.0)
    exemplars: int = Field(default=8, ge=1)
    lr: float = Field(default=1e-2, gt=0)
    iterations: int = Field(default=500, ge=1)
    draws_per_step: int = Field(default=4, ge=1)
    worst_case_steps: int = Field(default=5, ge=1)
    early_stop_loss: float = Field(default=0.02, ge=0.0)
    early_stop_patience: int = Field(default=10, ge=1)
    unanimous: bool = False


class EotDistributionConfig(_StrictModel):
    angle_range: tuple[float, float] = (0.0, 45.0)
    scale_range: tuple[float, float] = (0.5, 1.0)
    brightness_jitter: float = Field(default=0.2, ge=0.0, le=0.5)
    noise_sigma: float = Field(default=0.02, ge=0.0, le=0.1)

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.angle_range
        if not 0.0 <= lo <= hi <= 60.0:
            raise ValueError("angle_range must satisfy 0 <= lo <= hi <= 60")
        slo, shi = self.scale_range
        if not 0.0 < slo <= shi <= 1.0:
            raise ValueError("scale_range must satisfy 0 < lo <= hi <= 1")
        return self


class FusionConfig(_StrictModel):
    target_weight: float = Field(default=1.0, ge=0.0)
    clean_weight: float = Field(default=0.1, ge=0.0)
    mask_l1_per_pixel: float = Field(default=1e-3, ge=0.0)
    mask_tv_weight: float = Field(default=1e-2, ge=0.0)
    ssim_weight: float = Field(default=1.0, ge=0.0)
    tau: float = Field(default=0.7, ge=0.0, le=1.0)
    lr: float = Field(default=0.05, gt=0)
    # Sized for the in-loop view sampling below; the loop stops early long
    # before this when the margin arrives sooner, so plain attacks pay only
    # for what they need.
    iterations: int = Field(default=700, ge=1)
    ssim_floor: float = Field(default=0.75, ge=0.0, le=1.0)
    stop_confidence: float = Field(default=0.85, ge=0.0, le=1.0)
    clean_ce_ceiling: float = Field(default=10.0, gt=0.0)
    attention_normalization: str = Field(default="mean")
    check_every: int = Field(default=5, ge=1)
    per_channel_mask: bool = False
    optimize_at_tau: bool = True
    eot_in_loop: bool = True
    eot_samples: int = Field(default=4, ge=1)
    eot_anchor_hardest: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.attention_normalization not in ("none", "mean", "zscore"):
            raise ValueError("attention_normalization must be 'none', 'mean', or 'zscore'")
        return self


class ViewConditionConfig(_StrictModel):
    name: str
    distance_scale: float = Field(default=1.0, gt=0.0, le=1.0)
    angle_deg: float = Field(default=0.0, ge=0.0, le=60.0)
    brightness_jitter: float = Field(default=0.0, ge=0.0, le=0.5)
    noise_sigma: float = Field(default=0.0, ge=0.0, le=0.1)


def _default_view_grid() -> list[ViewConditionConfig]:
    return [
        ViewConditionConfig(name="nominal"),
        ViewConditionConfig(name="scale_067", distance_scale=0.67),
        ViewConditionConfig(name="scale_050", distance_scale=0.5),
        ViewConditionConfig(name="angle_15", angle_deg=15.0),
        ViewConditionConfig(name="angle_30", angle_deg=30.0),
        ViewConditionConfig(name="angle_45", angle_deg=45.0),
        ViewConditionConfig(name="angle_45_scale_050", angle_deg=45.0, distance_scale=0.5),
    ]


class EvaluationConfig(_StrictModel):
    view_grid: list[ViewConditionConfig] = Field(default_factory=_default_view_grid)
    perceptual_backend: str = Field(default="none")

    @model_validator(mode="after")
    def _check(self):
        names = [c.name for c in self.view_grid]
        if len(set(names)) != len(names):
            raise ValueError("view_grid names must be unique")
        if self.perceptual_backend not in ("none", "lpips"):
            raise ValueError("perceptual_backend must be 'none' or 'lpips'")
        return self


class ExperimentConfig(_StrictModel):
    dataset: DatasetConfig
    models: ModelsConfig = Field(default_factory=ModelsConfig)
    autoencoder: AutoencoderConfig = Field(default_factory=AutoencoderConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    disentangle: DisentangleConfig = Field(default_factory=DisentangleConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    eot: EotDistributionConfig = Field(default_factory=EotDistributionConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    seed: int = 0
    output_dir: str | None = None


def _pointer(loc: tuple) -> str:
    return "/" + "/".join(str(part) for part in loc)


def _violations_from(err: ValidationError) -> list[tuple[str, str]]:
    return [(_pointer(e["loc"]), e["msg"]) for e in err.errors()]


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as err:
        raise ConfigValidationError(_violations_from(err)) from err


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigValidationError([("", f"config file not found: {path}")])
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigValidationError([("", f"not valid JSON: {err}")]) from err
    if not isinstance(raw, dict):
        raise ConfigValidationError([("", "top-level config must be a JSON object")])
    return parse_config(raw)


def normalized_dict(cfg: ExperimentConfig, include_output: bool = True) -> dict:
    """Complete effective config (defaults filled), JSON-ready."""
    data = cfg.model_dump(mode="json")
    if not include_output:
        data.pop("output_dir", None)
    return data


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that affects results; output_dir deliberately excluded."""
    return sha256_text(canonical_json(normalized_dict(cfg, include_output=False)))
