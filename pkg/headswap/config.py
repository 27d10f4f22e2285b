"""
Configuration models and the layered loader (YAML file < HEADSWAP_* environment < flags).
"""

import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigurationError
from .types import InpaintOptions, LogLevel

logger = logging.getLogger(__name__)

ENV_PREFIX = "HEADSWAP_"

RESOLUTION_PRESETS = (64, 256, 512)

# Generator channel widths at full scale, one entry per upsampling block from 4x4.
_GENERATOR_WIDTHS = (512, 512, 512, 256, 128, 64, 32)

DEFAULT_FALLBACK: Dict[str, str] = {
    "beard": "hair",
    "hat": "hair",
    "headphones": "hair",
    "glasses": "face",
    "teeth": "lips",
    "mouth": "lips",
    "ears": "face",
    "brows": "hair",
    "earrings": "face",
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


def _check_resolution(value: int) -> int:
    if value not in RESOLUTION_PRESETS:
        raise ValueError(f"resolution must be one of {RESOLUTION_PRESETS}")
    return value


class AlignerConfig(_Section):
    """Architecture of the reenactment network."""

    resolution: int = 64
    width_multiplier: float = Field(0.25, gt=0.0, le=1.0)
    face_crop_fraction: float = Field(0.6, gt=0.0, le=1.0)
    face_crop_size: Optional[int] = Field(None, ge=8)
    stretch_range: Tuple[float, float] = (0.75, 1.25)
    freeze_identity: bool = False
    disc_base_channels: int = Field(32, ge=4)
    disc_layers: int = Field(3, ge=1)
    disc_scales: int = Field(2, ge=1)
    seed: int = 0

    @field_validator("resolution")
    @classmethod
    def check_resolution(cls, value: int) -> int:
        return _check_resolution(value)

    @field_validator("stretch_range")
    @classmethod
    def check_stretch_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0.0 < low <= 1.0 <= high:
            raise ValueError("stretch_range must satisfy 0 < low <= 1 <= high")
        return value

    @property
    def generator_blocks(self) -> int:
        return int(math.log2(self.resolution // 4))

    @property
    def crop_size(self) -> int:
        return self.face_crop_size or self.resolution // 2

    def generator_channels(self) -> List[int]:
        return [max(8, int(c * self.width_multiplier)) for c in _GENERATOR_WIDTHS[: self.generator_blocks]]

    def encoder_channels(self) -> List[int]:
        return [max(8, int(c * self.width_multiplier)) for c in (64, 128, 256, 512)]


class AugmentPolicy(_Section):
    """Color jitter C' and horizontal flip F used while training reference creation."""

    brightness: float = Field(0.2, ge=0.0, le=1.0)
    contrast: float = Field(0.2, ge=0.0, le=1.0)
    saturation: float = Field(0.2, ge=0.0, le=1.0)
    hflip: bool = True


class RefCreateConfig(_Section):
    """Dense features and correlation settings for the head color reference."""

    feature_dim: int = Field(64, ge=1)
    levels: int = Field(3, ge=1)
    base_channels: int = Field(16, ge=4)
    tau: float = Field(0.01, gt=0.0)
    min_donor_pixels: int = Field(32, ge=1)
    fallback: Dict[str, str] = Field(default_factory=lambda: dict(DEFAULT_FALLBACK))
    augment: AugmentPolicy = Field(default_factory=AugmentPolicy)
    seed: int = 0

    def min_donor_for(self, height: int, width: int) -> int:
        """Donor threshold scaled from its 64x64 reference by image area."""
        return max(1, int(math.ceil(self.min_donor_pixels * height * width / (64 * 64))))


class InpaintMaskPolicy(_Section):
    """Random growth applied to the inpainting mask while training the blender."""

    enabled: bool = True
    max_growth: int = Field(3, ge=0)
    max_blobs: int = Field(3, ge=0)
    blob_radius: Tuple[int, int] = (1, 4)
    max_area_ratio: float = Field(3.0, ge=1.0)


class BlenderConfig(_Section):
    """Architecture of the blending network."""

    resolution: int = 64
    base_channels: int = Field(32, ge=4)
    levels: int = Field(4, ge=1)
    composite_background: bool = True
    dilation_radius: Optional[int] = Field(None, ge=0)
    include_neck: bool = False
    disc_base_channels: int = Field(32, ge=4)
    disc_layers: int = Field(3, ge=1)
    disc_scales: int = Field(2, ge=1)
    mask_policy: InpaintMaskPolicy = Field(default_factory=InpaintMaskPolicy)
    seed: int = 0

    @field_validator("resolution")
    @classmethod
    def check_resolution(cls, value: int) -> int:
        return _check_resolution(value)


class AlignerLossWeights(_Section):
    lambda_adv: float = Field(0.1, ge=0.0)
    lambda_fm: float = Field(10.0, ge=0.0)
    lambda_l1: float = Field(30.0, ge=0.0)
    lambda_perc_vgg: float = Field(0.01, ge=0.0)
    lambda_perc_id: float = Field(2e-3, ge=0.0)
    lambda_cos_id: float = Field(0.01, ge=0.0)
    lambda_dice: float = Field(1.0, ge=0.0)
    lambda_emo: float = Field(1.0, ge=0.0)
    lambda_kpt: float = Field(30.0, ge=0.0)
    lambda_gaze: float = Field(0.5, ge=0.0)


class BlenderLossWeights(_Section):
    lambda_adv: float = Field(1.0, ge=0.0)
    lambda_l1: float = Field(1.0, ge=0.0)
    lambda_perc_vgg: float = Field(0.01, ge=0.0)
    lambda_c: float = Field(1.0, ge=0.0)
    lambda_reg: float = Field(1.0, ge=0.0)


class LossWeights(_Section):
    aligner: AlignerLossWeights = Field(default_factory=AlignerLossWeights)
    blender: BlenderLossWeights = Field(default_factory=BlenderLossWeights)


class TrainConfig(_Section):
    """Optimizer and schedule shared by both training stages."""

    batch_size: int = Field(8, ge=1)
    iterations: int = Field(2000, ge=0)
    lr_g: float = Field(1e-4, gt=0.0)
    lr_d: float = Field(4e-4, gt=0.0)
    beta1: float = Field(0.0, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    grad_clip: float = Field(10.0, gt=0.0)
    gaze_start_fraction: float = Field(0.9, ge=0.0, le=1.0)
    cycle_prime: bool = True
    cycle_prime_compare: Literal["target", "target_prime"] = "target"
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(10, ge=1)
    seed: int = 0
    device: str = "cpu"
    run_dir: str = "runs"


class InpaintConfig(_Section):
    transport: Literal["local", "subprocess", "http"] = "local"
    command: List[str] = Field(default_factory=list)
    url: Optional[str] = None
    timeout: float = Field(120.0, gt=0.0)
    max_in_flight: int = Field(2, ge=1)
    serial_only: bool = False
    tolerance: float = Field(1e-4, gt=0.0)
    max_iterations: int = Field(5000, ge=1)

    def to_options(self) -> InpaintOptions:
        options: InpaintOptions = {
            "transport": self.transport,
            "timeout": self.timeout,
            "max_in_flight": self.max_in_flight,
            "serial_only": self.serial_only,
            "tolerance": self.tolerance,
            "max_iterations": self.max_iterations,
        }
        if self.command:
            options["command"] = list(self.command)
        if self.url:
            options["url"] = self.url
        return options


class DataConfig(_Section):
    n_pairs: int = Field(500, ge=1)
    resolution: int = 64
    seed: int = 0
    workers: int = Field(4, ge=1)

    @field_validator("resolution")
    @classmethod
    def check_resolution(cls, value: int) -> int:
        return _check_resolution(value)


class SwapConfig(_Section):
    postprocess: bool = False
    hair_extrapolation_radius: Optional[int] = Field(None, ge=0)


class EvalConfig(_Section):
    workers: int = Field(2, ge=1)
    max_pairs: Optional[int] = Field(None, ge=1)


class HeadSwapConfig(_Section):
    """Complete configuration of every stage."""

    aligner: AlignerConfig = Field(default_factory=AlignerConfig)
    refcreate: RefCreateConfig = Field(default_factory=RefCreateConfig)
    blender: BlenderConfig = Field(default_factory=BlenderConfig)
    losses: LossWeights = Field(default_factory=LossWeights)
    train: TrainConfig = Field(default_factory=TrainConfig)
    inpaint: InpaintConfig = Field(default_factory=InpaintConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    swap: SwapConfig = Field(default_factory=SwapConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    log_level: LogLevel = "info"
    log_file: Optional[str] = None

    @model_validator(mode="after")
    def check_resolutions_agree(self) -> "HeadSwapConfig":
        if self.aligner.resolution != self.blender.resolution:
            raise ValueError("aligner.resolution and blender.resolution must match")
        return self


def config_hash(model: Union[BaseModel, Mapping[str, BaseModel]]) -> str:
    """sha256 of the canonical JSON dump of a config model (or a mapping of named models)."""
    if isinstance(model, BaseModel):
        payload: Any = model.model_dump(mode="json")
    else:
        payload = {name: section.model_dump(mode="json") for name, section in model.items()}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _nest(path: List[str], value: Any) -> Dict[str, Any]:
    nested: Dict[str, Any] = {path[-1]: value}
    for key in reversed(path[:-1]):
        nested = {key: nested}
    return nested


def _parse_scalar(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def env_overrides(env: Mapping[str, str]) -> Dict[str, Any]:
    """Turn HEADSWAP_SECTION__KEY=value variables into a nested mapping."""
    result: Dict[str, Any] = {}
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [part.lower() for part in name[len(ENV_PREFIX) :].split("__") if part]
        if not path:
            continue
        result = deep_merge(result, _nest(path, _parse_scalar(env[name])))
    return result


def parse_assignments(assignments: List[str]) -> Dict[str, Any]:
    """Turn ["train.lr_g=2e-4", ...] into a nested mapping."""
    result: Dict[str, Any] = {}
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"Expected key=value, got '{item}'", item)
        path = [part for part in key.strip().split(".") if part]
        result = deep_merge(result, _nest(path, _parse_scalar(value)))
    return result


def load_config(
    path: Optional[Union[str, Path]] = None,
    env: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> HeadSwapConfig:
    """
    Build the effective configuration.

    Args:
        path: Optional YAML file
        env: Environment mapping (defaults to os.environ)
        overrides: Nested mapping from command-line flags; wins over everything else

    Returns:
        Validated HeadSwapConfig

    Raises:
        ConfigurationError: If the file cannot be read or any key or value is invalid
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigurationError(f"Cannot read config file {path}: {str(e)}", str(path)) from e
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML in {path}: {str(e)}", str(path)) from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"Config file {path} must contain a mapping", str(path))
        data = loaded

    data = deep_merge(data, env_overrides(os.environ if env is None else env))
    if overrides:
        data = deep_merge(data, overrides)

    try:
        config = HeadSwapConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first.get("loc", ()))
        raise ConfigurationError(f"Invalid configuration at '{key}': {first.get('msg')}", key) from e
    logger.debug("Loaded configuration %s", config_hash(config)[:12])
    return config
