import math
import os
from pathlib import Path
from typing import List, Optional

import yaml
from dotenv import load_dotenv
from pydantic import AliasChoices, BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.helpers.exceptions import PipelineError

load_dotenv()


class Settings(BaseSettings):
    """
    Process-level settings read from the environment (and an optional `.env` file).

    Attributes:
        log_level (str): Logging level, from LOG_LEVEL.
        config_path (Path | None): Training config override, from G4D_CONFIG.
        threads (int): Worker pool size for tile and frame parallelism, from G4D_THREADS.
        seed (int): Default random seed, from G4D_SEED.
        progress (bool): Show tqdm progress bars, from G4D_PROGRESS.
    """

    model_config = SettingsConfigDict(env_prefix="G4D_", env_file=".env", extra="ignore")

    log_level: str = Field(default="INFO", validation_alias=AliasChoices("LOG_LEVEL", "G4D_LOG_LEVEL"))
    config_path: Optional[Path] = Field(default=None, validation_alias=AliasChoices("G4D_CONFIG"))
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    seed: int = 0
    progress: bool = True


class LossWeights(BaseModel):
    """Weights of the energy terms combined by one optimization stage."""

    iso: float = 0.0
    size: float = 0.0
    id: float = 0.0
    emb: float = 0.0
    kl3d: float = 0.0
    smooth: float = 0.0
    sdf: float = 0.0
    temp_bg: float = 0.0
    temp: float = 0.0
    color: float = 1.0
    dssim_mix: float = Field(default=0.2, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_finite_non_negative(self) -> "LossWeights":
        for name, value in self.model_dump().items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight '{name}' must be finite and non-negative, got {value}")
        return self


def background_weights() -> LossWeights:
    return LossWeights(iso=0.0005, size=0.02)


def first_frame_weights() -> LossWeights:
    return LossWeights(id=2.0, emb=10.0, kl3d=2.0)


def refine_weights() -> LossWeights:
    return LossWeights(smooth=0.01)


def frame_weights() -> LossWeights:
    return LossWeights(sdf=0.01, temp_bg=0.001, temp=0.01, smooth=0.0001, id=1.0, emb=10.0, kl3d=2.0)


class IterationCounts(BaseModel):
    bg: int = Field(default=20000, ge=0)
    first: int = Field(default=30000, ge=0)
    refine: int = Field(default=3000, ge=0)
    frame: int = Field(default=8000, ge=0)


class LearningRates(BaseModel):
    """Per-attribute Adam learning rates; position decays exponentially over each schedule."""

    position: float = 1.6e-4
    position_final_factor: float = Field(default=0.01, gt=0.0, le=1.0)
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    sh: float = 2.5e-3
    feature: float = 2.5e-3
    heads: float = 1e-3
    autoencoder: float = 1e-3


class AdamConfig(BaseModel):
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15


class DensifyConfig(BaseModel):
    interval: int = Field(default=300, ge=1)
    cap: float = Field(default=0.05, ge=0.0, le=1.0)
    init_cap: float = Field(default=1.0, ge=0.0, le=1.0)
    grad_threshold: float = Field(default=2e-4, ge=0.0)
    min_opacity: float = Field(default=0.005, ge=0.0, le=1.0)
    max_screen_fraction: float = Field(default=0.2, gt=0.0, le=1.0)
    percent_dense: float = Field(default=0.01, gt=0.0)
    clone_jitter: float = Field(default=0.1, ge=0.0)
    split_scale_divisor: float = Field(default=1.6, gt=1.0)


class RasterConfig(BaseModel):
    tile_size: int = Field(default=16, ge=1)
    transmittance_cutoff: float = Field(default=1e-4, ge=0.0)
    dilation: float = Field(default=0.3, ge=0.0)
    radius_sigma: float = Field(default=3.0, gt=0.0)
    near_plane: float = Field(default=0.01, gt=0.0)
    sh_degree: int = Field(default=3, ge=0, le=3)
    alpha_norm_eps: float = Field(default=1e-3, ge=0.0)


class AblationConfig(BaseModel):
    semantic_features: bool = True
    explicit_warping: bool = True
    motion_refinement: bool = True
    training_stage: bool = True


class WarpConfig(BaseModel):
    visibility_threshold: float = Field(default=0.05, ge=0.0)
    residual_gate_px: float = Field(default=3.0, gt=0.0)
    degenerate_rel_tol: float = Field(default=1e-9, gt=0.0)


class SeedingConfig(BaseModel):
    bg_random_count: int = Field(default=2000, ge=1)
    fg_points_per_instance: int = Field(default=400, ge=1)
    fg_seed_views: int = Field(default=3, ge=1)
    initial_scale_factor: float = Field(default=0.5, gt=0.0)


class HeadConfig(BaseModel):
    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    leaky_slope: float = 0.01
    code_dim: int = Field(default=6, ge=1)
    autoencoder_steps: int = Field(default=500, ge=0)


class TrainConfig(BaseModel):
    """
    Every tunable of the four optimization schedules.

    The defaults are the full-length schedule; tests and desk runs shrink
    `iterations` through a YAML config file or keyword overrides.
    """

    iterations: IterationCounts = Field(default_factory=IterationCounts)
    background: LossWeights = Field(default_factory=background_weights)
    first_frame: LossWeights = Field(default_factory=first_frame_weights)
    refine: LossWeights = Field(default_factory=refine_weights)
    frame: LossWeights = Field(default_factory=frame_weights)
    lr: LearningRates = Field(default_factory=LearningRates)
    adam: AdamConfig = Field(default_factory=AdamConfig)
    densify: DensifyConfig = Field(default_factory=DensifyConfig)
    raster: RasterConfig = Field(default_factory=RasterConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    warp: WarpConfig = Field(default_factory=WarpConfig)
    seeding: SeedingConfig = Field(default_factory=SeedingConfig)
    heads: HeadConfig = Field(default_factory=HeadConfig)
    kl_sample_count: int = Field(default=6000, ge=1)
    knn_k: int = Field(default=4, ge=1)
    size_threshold_fraction: float = Field(default=0.05, gt=0.0)
    held_out_views: List[int] = Field(default_factory=list)
    seed: int = 0
    log_every: int = Field(default=1, ge=1)

    @field_validator("held_out_views")
    @classmethod
    def check_views(cls, views: List[int]) -> List[int]:
        if any(v < 0 for v in views):
            raise ValueError("held_out_views must be non-negative view indices")
        return sorted(set(views))


def load_train_config(path: Optional[Path] = None, **overrides) -> TrainConfig:
    """
    Load and validate a training configuration.

    Args:
        path (Path | None): YAML (or JSON, a YAML subset) file. Falls back to the G4D_CONFIG
            environment override, then to pure defaults.
        **overrides: Top-level keys replacing file values.

    Returns:
        TrainConfig: The validated configuration.

    Raises:
        PipelineError: If the file cannot be read or fails validation.
    """
    if path is None:
        path = Settings().config_path
    data = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = yaml.safe_load(handle) or {}
        except (OSError, yaml.YAMLError) as e:
            raise PipelineError(f"cannot read config {path}: {e}")
    data.update(overrides)
    try:
        return TrainConfig.model_validate(data)
    except ValueError as e:
        raise PipelineError(f"invalid config {path}: {e}")


def dump_default_config() -> str:
    """
    Returns:
        str: The documented key -> default table as YAML, mirroring TrainConfig.
    """
    return yaml.safe_dump(TrainConfig().model_dump(), sort_keys=False)
