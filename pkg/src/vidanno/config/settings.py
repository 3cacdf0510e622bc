"""Configuration settings for Video Box Annotator."""

from __future__ import annotations

import json
import os
import sys
import tomllib
from enum import Enum
from pathlib import Path
from typing import Annotated, Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from vidanno.core.errors import ConfigError


class AggregationOperator(str, Enum):
    """Row/column aggregation operators for masks."""

    RECTIFIED_ACCUMULATION = "rectified_accumulation"  # min(1, sum)
    RECTIFIED_MAX = "rectified_max"  # max(1, sum)
    MAX_POOL = "max_pool"
    AVERAGE = "average"
    SUM = "sum"


class MaskPredictorKind(str, Enum):
    """Visual mask predictor selection."""

    ORACLE = "oracle"  # Appearance-similarity segmenter
    CONV = "conv"  # Small trainable encoder-decoder


class TieBreak(str, Enum):
    """Direction preferred when both quality scores are equal."""

    FORWARD_FIRST = "forward_first"


class _Section(BaseModel):
    """Base for config sections; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


class PathsConfig(_Section):
    """Artifact locations, relative to the output root unless absolute."""

    data_dir: Path = Path("data")
    checkpoint_dir: Path = Path("checkpoints")
    output_dir: Path = Path("outputs")


class DataConfig(_Section):
    """Ingestion settings."""

    anchor_interval: Annotated[int, Field(ge=1)] = 30
    response_size: Annotated[int, Field(ge=4, le=256)] = 32
    resize_response_maps: bool = False


class WindowConfig(_Section):
    """Sliding-window settings for the sequential models."""

    length: Annotated[int, Field(ge=2)] = 20
    stride: Annotated[int, Field(ge=1)] = 10


class QualityMapParams(_Section):
    """Parameters of the IoU to quality-score mapping."""

    alpha: Annotated[float, Field(gt=0.0)] = 50.0
    beta: Annotated[float, Field(ge=1.0)] = 2.0


class EvaluationConfig(_Section):
    """Evaluation metric settings."""

    acc_thresholds: list[Annotated[float, Field(ge=0.0, le=1.0)]] = [0.5, 0.7]
    error_iou: Annotated[float, Field(ge=0.0, le=1.0)] = 0.5


class AssessConfig(_Section):
    """Temporal quality-assessment network."""

    feature_dim: Annotated[int, Field(ge=1)] = 64
    conv_channels: list[Annotated[int, Field(ge=1)]] = [16, 32, 32]
    hidden_size: Annotated[int, Field(ge=1)] = 128
    num_layers: Annotated[int, Field(ge=1)] = 3
    sequential: bool = True  # False: per-slot fully connected layers
    shared_predictor: bool = False  # True: one predictor for both directions


class RefineConfig(_Section):
    """Visual-geometry refinement network."""

    mask_height: Annotated[int, Field(ge=2)] = 64  # P
    mask_width: Annotated[int, Field(ge=2)] = 64  # Q
    crop_size: Annotated[int, Field(ge=8)] = 128
    aggregation: AggregationOperator = AggregationOperator.RECTIFIED_ACCUMULATION
    mask_predictor: MaskPredictorKind = MaskPredictorKind.ORACLE
    feature_dim: Annotated[int, Field(ge=1)] = 64
    conv_channels: list[Annotated[int, Field(ge=1)]] = [16, 32, 32]
    hidden_size: Annotated[int, Field(ge=1)] = 128
    num_layers: Annotated[int, Field(ge=1)] = 3
    sequential: bool = True
    interpolation_alpha: Annotated[float, Field(ge=0.0)] = 1.0
    similarity_width: Annotated[float, Field(gt=0.0)] = 0.12
    max_train_frames: Annotated[int, Field(ge=1)] = 20000
    mask_train_frames: Annotated[int, Field(ge=1)] = 2000  # conv predictor crops


class TrainConfig(_Section):
    """Optimization settings shared by both networks."""

    learning_rate: Annotated[float, Field(ge=0.0)] = 1e-3
    batch_size: Annotated[int, Field(ge=1)] = 32
    epochs: Annotated[int, Field(ge=1)] = 20
    max_steps: Annotated[int, Field(ge=1)] | None = None
    val_fraction: Annotated[float, Field(ge=0.0, lt=1.0)] = 0.2
    log_every: Annotated[int, Field(ge=1)] = 50


class InferenceConfig(_Section):
    """Box decoding, selection and failure flagging."""

    tau: Annotated[float, Field(gt=0.0, le=1.0)] = 0.5
    failure_threshold: Annotated[float, Field(ge=0.0)] = 0.0
    tie_break: TieBreak = TieBreak.FORWARD_FIRST


class SynthConfig(_Section):
    """Synthetic video and tracker generator."""

    seed: int = 0
    frame_count: Annotated[int, Field(ge=2)] = 900
    width: Annotated[int, Field(ge=32)] = 320
    height: Annotated[int, Field(ge=32)] = 240
    anchor_interval: Annotated[int, Field(ge=1)] = 30
    # Target motion: bounded random walk on the centre, log-scale drift on the size
    max_velocity: Annotated[float, Field(ge=0.0)] = 3.0
    scale_drift: Annotated[float, Field(ge=0.0, le=0.2)] = 0.01
    min_box: Annotated[float, Field(gt=4.0)] = 24.0
    max_box: Annotated[float, Field(gt=4.0)] = 72.0
    # Tracker noise
    sigma_pos: Annotated[float, Field(ge=0.0, le=1.0)] = 0.06
    sigma_scale: Annotated[float, Field(ge=0.0, le=1.0)] = 0.06
    p_drift: Annotated[float, Field(ge=0.0, le=1.0)] = 0.05
    drift_magnitude: Annotated[float, Field(ge=0.0, le=2.0)] = 0.15
    # Appearance
    distractor_count: Annotated[int, Field(ge=0, le=8)] = 2
    texture_contrast: Annotated[float, Field(ge=0.0, le=0.5)] = 0.25
    # Response maps
    response_size: Annotated[int, Field(ge=4, le=256)] = 32
    response_noise: Annotated[float, Field(ge=0.0, le=1.0)] = 0.05
    response_floor: Annotated[float, Field(ge=0.0, le=1.0)] = 0.1

    @model_validator(mode="after")
    def _check_box_range(self) -> SynthConfig:
        if not self.min_box <= self.max_box <= min(self.width, self.height) / 2:
            raise ValueError(
                f"need min_box <= max_box <= half the frame size, got {self.min_box}, "
                f"{self.max_box} for {self.width}x{self.height}"
            )
        return self


class RunConfig(_Section):
    """Top-level run configuration.

    This represents the structure of the config.toml file. Every field has
    a default, so an empty file is a valid configuration.
    """

    seed: int = 0
    workers: Annotated[int, Field(ge=1)] = 1
    paths: PathsConfig = PathsConfig()
    data: DataConfig = DataConfig()
    window: WindowConfig = WindowConfig()
    quality: QualityMapParams = QualityMapParams()
    evaluation: EvaluationConfig = EvaluationConfig()
    assess: AssessConfig = AssessConfig()
    refine: RefineConfig = RefineConfig()
    train: TrainConfig = TrainConfig()
    inference: InferenceConfig = InferenceConfig()
    synth: SynthConfig = SynthConfig()

    @classmethod
    def default(cls) -> RunConfig:
        """Create default run configuration."""
        return cls()


def get_config_dir() -> Path:
    """Get the configuration directory path.

    Priority:
        1. VIDANNO_CONFIG_DIR environment variable
        2. Windows: %APPDATA%/vidanno
        3. Unix: $XDG_CONFIG_HOME/vidanno or ~/.config/vidanno
    """
    env_dir = os.environ.get("VIDANNO_CONFIG_DIR")
    if env_dir:
        return Path(env_dir)

    if sys.platform == "win32":
        appdata = os.environ.get("APPDATA")
        if appdata:
            return Path(appdata) / "vidanno"
        return Path.home() / "AppData" / "Roaming" / "vidanno"

    xdg_config = os.environ.get("XDG_CONFIG_HOME")
    if xdg_config:
        return Path(xdg_config) / "vidanno"
    return Path.home() / ".config" / "vidanno"


def get_config_path() -> Path:
    """Get the configuration file path.

    Priority:
        1. VIDANNO_CONFIG environment variable (full path to file)
        2. {config_dir}/config.toml
    """
    env_path = os.environ.get("VIDANNO_CONFIG")
    if env_path:
        return Path(env_path)
    return get_config_dir() / "config.toml"


def get_output_root() -> Path:
    """Root directory that relative artifact paths resolve against."""
    env_root = os.environ.get("VIDANNO_OUTPUT_ROOT")
    return Path(env_root) if env_root else Path(".")


def resolve_path(path: Path) -> Path:
    """Resolve a configured path against the output root."""
    path = path.expanduser()
    return path if path.is_absolute() else get_output_root() / path


def load_run_config(path: Path | None = None) -> RunConfig:
    """Load the run configuration from a TOML file.

    Args:
        path: Explicit config file. Defaults to get_config_path().

    Returns:
        RunConfig. Defaults are returned when no file exists at the default
        location; an explicit path that does not exist is an error.

    Raises:
        ConfigError: If the file is unreadable or fails validation.
    """
    explicit = path is not None
    config_path = path if path is not None else get_config_path()

    if not config_path.exists():
        if explicit:
            raise ConfigError(f"Config file not found: {config_path}")
        return RunConfig.default()

    try:
        with config_path.open("rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {config_path}: {e}") from e

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration in {config_path}: {_first_error(e)}") from e


def save_run_config(config: RunConfig, path: Path | None = None) -> Path:
    """Save the run configuration to a TOML file.

    Returns:
        Path to the saved config file.
    """
    config_path = path if path is not None else get_config_path()
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_path.write_text(config_to_toml(config), encoding="utf-8")
    return config_path


def config_to_toml(config: RunConfig) -> str:
    """Convert RunConfig to a TOML string."""
    data = config.model_dump(mode="json")
    lines: list[str] = []
    sections: list[tuple[str, dict[str, Any]]] = []

    for key, value in data.items():
        if isinstance(value, dict):
            sections.append((key, value))
        elif value is not None:
            lines.append(f"{key} = {_toml_value(value)}")
    lines.append("")

    for name, values in sections:
        lines.append(f"[{name}]")
        for key, value in values.items():
            if value is not None:
                lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")

    return "\n".join(lines)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int | float):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    # JSON string escaping is valid for TOML basic strings
    return json.dumps(str(value))


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` overrides and re-validate.

    Values are parsed as TOML literals where possible ("true", "0.5",
    "[0.5, 0.7]"), otherwise taken as plain strings; "none" clears an
    optional field.

    Raises:
        ConfigError: If an override is malformed, names an unknown key, or
            produces an invalid configuration.
    """
    data = config.model_dump()

    for override in overrides:
        key, sep, raw = override.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"Invalid override: {override!r}. Use 'section.key=value'.")
        target, field = _locate_key(data, key)
        target[field] = _parse_value(raw.strip())

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid override: {_first_error(e)}") from e


def get_config_value(config: RunConfig, key: str) -> Any:
    """Get a configuration value by dotted key (e.g., "train.learning_rate").

    Raises:
        ConfigError: If the key is unknown.
    """
    data = config.model_dump(mode="json")
    target, field = _locate_key(data, key)
    return target[field]


def config_keys(config: RunConfig | None = None) -> list[str]:
    """List every dotted configuration key."""
    data = (config or RunConfig.default()).model_dump()
    keys: list[str] = []
    for name, value in data.items():
        if isinstance(value, dict):
            keys.extend(f"{name}.{field}" for field in value)
        else:
            keys.append(name)
    return keys


def _locate_key(data: dict[str, Any], key: str) -> tuple[dict[str, Any], str]:
    parts = key.split(".")
    if len(parts) == 1 and parts[0] in data and not isinstance(data[parts[0]], dict):
        return data, parts[0]
    if len(parts) != 2:
        raise ConfigError(f"Invalid key format: {key}. Use 'section.key' format.")

    section, field = parts
    values = data.get(section)
    if not isinstance(values, dict):
        raise ConfigError(f"Unknown section: {section}")
    if field not in values:
        raise ConfigError(f"Unknown {section} field: {field}")
    return values, field


def _parse_value(raw: str) -> Any:
    if raw.lower() == "none":
        return None
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    return f"{location}: {first['msg']}"
