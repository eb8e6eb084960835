"""
Configuration definitions for the QdaVPR package.

All settings are frozen dataclasses grouped by concern and collected in an
``ExperimentConfig``. Configs are read from and written to JSON or YAML files,
the file type is selected by the path suffix.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, get_origin, get_type_hints

# typing_extensions for generic TypedDict support:
from typing_extensions import TypedDict

from qdavpr.error import ConfigError, ParsingError, PathError

DEVICE_ENV = "QDAVPR_DEVICE"

####################################################################################################
### Enums
####################################################################################################


class BackboneKind(str, Enum):
    """Source of the local features fed into the BoQ blocks."""

    TOY = "toy"
    EXTERNAL = "external-features"


class ProtocolMode(str, Enum):
    """Ground truth definition used by Recall@N."""

    GEO = "geo"
    FRAME = "frame"
    PAIRWISE = "pairwise"


####################################################################################################
### Sections
####################################################################################################


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the base architecture (``L`` blocks of ``M`` queries with ``d`` channels)."""

    blocks: int = 2
    queries: int = 64
    dim: int = 384
    combinations: int = 32
    encoder_heads: int = 8
    encoder_ffn_dim: int | None = None
    backbone_kind: BackboneKind = BackboneKind.TOY
    backbone_dim: int | None = None
    backbone_layers: int = 2
    patch_size: int = 14
    train_resize: int = 280
    eval_resize: int = 322
    seed: int = 0

    @property
    def ffn_dim(self) -> int:
        return self.encoder_ffn_dim if self.encoder_ffn_dim is not None else 4 * self.dim

    @property
    def in_channels(self) -> int:
        """Channel count entering the 3x3 reduction convolution."""
        return self.backbone_dim if self.backbone_dim is not None else self.dim

    def with_feature_channels(self, channels: int) -> ModelConfig:
        """Bind ``backbone_dim`` to the channel count ``d`` of an external features file."""
        if self.backbone_kind is not BackboneKind.EXTERNAL:
            raise ConfigError("Precomputed features need `model.backbone_kind: external-features`!")
        if self.backbone_dim is None:
            return dataclasses.replace(self, backbone_dim=channels)
        if self.backbone_dim != channels:
            raise ConfigError(
                f"The configured backbone dim `{self.backbone_dim}` differs from the "
                f"`{channels}` feature channels!"
            )
        return self

    @property
    def total_queries(self) -> int:
        return self.blocks * self.queries

    @property
    def descriptor_dim(self) -> int:
        return self.combinations * self.dim

    def validate(self) -> None:
        if self.blocks < 1:
            raise ConfigError(f"At least one BoQ block is required, got `{self.blocks}`!")
        if self.queries < 1:
            raise ConfigError(f"At least one query per block is required, got `{self.queries}`!")
        if self.combinations < 1 or self.combinations > self.total_queries:
            raise ConfigError(
                f"The combination count `{self.combinations}` must lie in "
                f"`1..{self.total_queries}` (blocks x queries)!"
            )
        if self.dim % self.encoder_heads != 0:
            raise ConfigError(
                f"Channel dim `{self.dim}` is not divisible by `{self.encoder_heads}` heads!"
            )
        if self.patch_size < 1:
            raise ConfigError(f"Invalid patch size `{self.patch_size}`!")
        for resize in (self.train_resize, self.eval_resize):
            if resize % self.patch_size != 0:
                raise ConfigError(
                    f"Resize `{resize}` is not a multiple of the patch size `{self.patch_size}`!"
                )


@dataclass(frozen=True)
class GRLConfig:
    coefficient: float = -1.0

    def validate(self) -> None:
        if not math.isfinite(self.coefficient):
            raise ConfigError(f"GRL coefficient must be finite, got `{self.coefficient}`!")


@dataclass(frozen=True)
class DiscriminatorConfig:
    hidden: int = 512

    def validate(self) -> None:
        if self.hidden < 1:
            raise ConfigError(f"Invalid discriminator width `{self.hidden}`!")


@dataclass(frozen=True)
class LocalLossConfig:
    """Margin ``alpha``, hard negative pool size ``G`` and selected combinations ``H``."""

    alpha: float = 0.05
    hard_negatives: int = 10
    top_combinations: int = 8

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ConfigError(f"Margin alpha must be positive, got `{self.alpha}`!")
        if self.hard_negatives < 1:
            raise ConfigError(f"G must be at least 1, got `{self.hard_negatives}`!")
        if self.top_combinations < 1:
            raise ConfigError(f"H must be at least 1, got `{self.top_combinations}`!")


@dataclass(frozen=True)
class LossWeights:
    local: float = 0.01
    adv_q: float = 0.05
    adv_x: float = 0.05
    ms_alpha: float = 1.0
    ms_beta: float = 50.0
    ms_base: float = 0.0
    miner_epsilon: float = 0.1

    def validate(self) -> None:
        for name in ("local", "adv_q", "adv_x", "miner_epsilon"):
            if getattr(self, name) < 0:
                raise ConfigError(f"Loss weight `{name}` must be nonnegative!")
        if self.ms_alpha <= 0 or self.ms_beta <= 0:
            raise ConfigError("The multi-similarity scales must be positive!")


@dataclass(frozen=True)
class BatchSpec:
    """``places`` x ``per_place`` images, each drawn from the original or one of six domains."""

    places: int = 160
    per_place: int = 4
    domain_sampling: bool = True

    @property
    def size(self) -> int:
        return self.places * self.per_place

    def validate(self) -> None:
        if self.places < 1 or self.per_place < 1:
            raise ConfigError(f"Invalid batch composition `{self.places}x{self.per_place}`!")


@dataclass(frozen=True)
class DomainTransformSpec:
    """Parameter ranges of the six synthetic domain stand-ins, sampled per image."""

    fog_density: tuple[float, float] = (0.35, 0.6)
    fog_contrast: tuple[float, float] = (0.55, 0.8)
    rain_drops: tuple[float, float] = (0.004, 0.01)
    rain_length: int = 9
    rain_opacity: tuple[float, float] = (0.35, 0.6)
    snow_flakes: tuple[float, float] = (0.01, 0.03)
    snow_desaturation: tuple[float, float] = (0.2, 0.4)
    wind_length: tuple[int, int] = (5, 11)
    night_gamma: tuple[float, float] = (1.8, 2.6)
    night_gain: tuple[float, float] = (0.45, 0.7)
    night_red_green: float = 0.8
    sun_lift: tuple[float, float] = (0.15, 0.3)
    sun_flare: tuple[float, float] = (0.3, 0.6)

    def validate(self) -> None:
        if self.night_gamma[0] <= 1.0 or self.night_gain[1] >= 1.0:
            raise ConfigError("The night transform must darken: gamma > 1 and gain < 1!")
        if self.night_red_green > 1.0:
            raise ConfigError("The night blue shift must not amplify red and green!")


@dataclass(frozen=True)
class AugmentConfig:
    """Basic augmentation applied after the domain transform."""

    basic: bool = False
    crop_shift: int = 8
    jitter: float = 0.2
    domains: DomainTransformSpec = field(default_factory=DomainTransformSpec)

    def validate(self) -> None:
        if self.crop_shift < 0 or not 0.0 <= self.jitter < 1.0:
            raise ConfigError("Invalid basic augmentation parameters!")
        self.domains.validate()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    warmup_epochs: int = 10
    base_lr: float = 3e-4
    decay_factor: float = 0.1
    decay_every: int = 10
    weight_decay: float = 1e-3
    steps_per_epoch: int | None = None
    grad_clip: float | None = None
    seed: int = 0
    manifest: str | None = None
    validation_manifest: str | None = None
    features: str | None = None
    validation_features: str | None = None
    output_dir: str = "runs/qdavpr"
    progress: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"At least one epoch is required, got `{self.epochs}`!")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(
                f"Warmup epochs `{self.warmup_epochs}` exceed the epoch count `{self.epochs}`!"
            )
        if self.base_lr <= 0 or self.decay_every < 1:
            raise ConfigError("Invalid learning rate schedule!")


@dataclass(frozen=True)
class EvalProtocol:
    mode: ProtocolMode = ProtocolMode.GEO
    geo_threshold_m: float = 25.0
    frame_tolerance: int = 10
    recall_ranks: tuple[int, ...] = (1, 5, 10)

    def validate(self) -> None:
        if self.geo_threshold_m <= 0:
            raise ConfigError(f"The geo threshold must be positive, got `{self.geo_threshold_m}`!")
        if self.frame_tolerance < 0:
            raise ConfigError(f"Negative frame tolerance `{self.frame_tolerance}`!")
        ranks = list(self.recall_ranks)
        if not ranks or ranks != sorted(set(ranks)) or ranks[0] < 1:
            raise ConfigError(f"Recall ranks `{ranks}` must be positive and ascending!")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    grl: GRLConfig = field(default_factory=GRLConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    local_loss: LocalLossConfig = field(default_factory=LocalLossConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    batch: BatchSpec = field(default_factory=BatchSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)

    def validate(self) -> None:
        for section in dataclasses.fields(self):
            getattr(self, section.name).validate()
        if self.local_loss.top_combinations > self.model.combinations:
            raise ConfigError(
                f"H `{self.local_loss.top_combinations}` exceeds the combination count "
                f"`{self.model.combinations}`!"
            )


####################################################################################################
### Serial forms
####################################################################################################


class ConfigStore(TypedDict, total=False):
    model: dict[str, Any]
    grl: dict[str, Any]
    discriminator: dict[str, Any]
    local_loss: dict[str, Any]
    weights: dict[str, Any]
    batch: dict[str, Any]
    augment: dict[str, Any]
    train: dict[str, Any]
    protocol: dict[str, Any]


def config_to_dict(config: Any) -> dict[str, Any]:
    """Convert a (nested) config dataclass into plain JSON compatible values."""
    result: dict[str, Any] = {}
    for entry in dataclasses.fields(config):
        value = getattr(config, entry.name)
        if dataclasses.is_dataclass(value):
            result[entry.name] = config_to_dict(value)
        elif isinstance(value, Enum):
            result[entry.name] = value.value
        elif isinstance(value, tuple):
            result[entry.name] = list(value)
        else:
            result[entry.name] = value
    return result


def config_from_dict(cls: type[Any], data: dict[str, Any] | None) -> Any:
    """Build the config dataclass ``cls`` from a plain dictionary, rejecting unknown keys."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ParsingError(f"Expected a mapping for `{cls.__name__}`, got `{type(data)}`!")

    hints = get_type_hints(cls)
    names = {entry.name for entry in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"Unknown keys `{sorted(unknown)}` in section `{cls.__name__}`!")

    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = config_from_dict(hint, value)
        elif get_origin(hint) is None and isinstance(hint, type) and issubclass(hint, Enum):
            try:
                kwargs[name] = hint(value)
            except ValueError as err:
                raise ConfigError(f"Invalid value `{value}` for `{name}`!") from err
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def override_config(config: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides, values are parsed as YAML scalars."""
    data = config_to_dict(config)
    for assignment in assignments:
        try:
            dotted, raw = assignment.split("=", 1)
            section, key = dotted.split(".", 1)
        except ValueError as err:
            raise ConfigError(
                f"Malformed override `{assignment}`, use `section.key=value`!"
            ) from err
        if section not in data or key not in data[section]:
            raise ConfigError(f"Unknown config entry `{dotted}`!")
        data[section][key] = _parse_scalar(raw)
    return config_from_dict(ExperimentConfig, data)


def parse_grid(entries: list[str]) -> dict[str, list[str]]:
    """Parse ``section.key=v1,v2,...`` sweep entries, a repeated key extends its values."""
    grid: dict[str, list[str]] = {}
    for entry in entries:
        dotted, sep, raw = entry.partition("=")
        values = [value.strip() for value in raw.split(",") if value.strip()]
        if not sep or "." not in dotted or not values:
            raise ConfigError(f"Malformed sweep entry `{entry}`, use `section.key=v1,v2`!")
        grid.setdefault(dotted.strip(), []).extend(values)
    return grid


def _parse_scalar(raw: str) -> Any:
    try:
        import yaml
    except ModuleNotFoundError:
        return json.loads(raw)
    return yaml.safe_load(raw)


####################################################################################################
### IO
####################################################################################################


def load_config(*, path: Path | str) -> ExperimentConfig:
    """Load an experiment config from a file formatted as JSON or YAML."""
    path = Path(path)
    ftype = path.suffix[1:]
    if not path.exists():
        raise PathError(f"Config file `{path}` does not exist!")

    with open(path, "r") as handle:
        serial_data = handle.read()

    if ftype == "json":
        try:
            data = json.loads(serial_data)
        except json.JSONDecodeError as err:
            raise ParsingError(f"Malformed JSON config `{path}`: {err}") from err
    elif ftype in ["yaml", "yml"]:
        yaml = _yaml_module()
        try:
            data = yaml.safe_load(serial_data)
        except yaml.YAMLError as err:
            raise ParsingError(f"Malformed YAML config `{path}`: {err}") from err
    else:
        raise PathError(
            f"Unknown file extension `{ftype}`! Possible extensions are: `json`, `yaml`"
        )

    config = config_from_dict(ExperimentConfig, data)
    config.validate()
    return config


def save_config(config: ExperimentConfig, *, path: Path | str) -> None:
    """Save a config to a file formatted as JSON or YAML."""
    path = Path(path)
    ftype = path.suffix[1:]
    store = ConfigStore(**config_to_dict(config))  # type: ignore[typeddict-item]

    if ftype == "json":
        serial_data = json.dumps(store, indent=2)
    elif ftype in ["yaml", "yml"]:
        serial_data = _yaml_module().safe_dump(dict(store), sort_keys=False)
    else:
        raise PathError(
            f"Unknown file extension `{ftype}`! Possible extensions are: `json`, `yaml`"
        )

    with open(path, "w") as handle:
        handle.write(serial_data)


def _yaml_module() -> Any:
    try:
        import yaml
    except ModuleNotFoundError:
        raise ModuleNotFoundError(
            "Reading YAML configs requires the installation of the optional dependency PyYAML."
            "To install PyYAML, use your preferred python package manager."
        )
    return yaml


def device_name() -> str:
    """Compute device selected through the ``QDAVPR_DEVICE`` environment variable."""
    return os.environ.get(DEVICE_ENV, "cpu")
