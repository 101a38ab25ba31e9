"""
Pipeline Configuration

Centralized configuration management: defaults, an optional TOML config
file, environment variables and command-line overrides.
"""
import logging
from pathlib import Path
from typing import Any, Literal, Optional, Tuple, Type

from pydantic import BaseModel, Field, field_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)


class CorpusSettings(BaseModel):
    """Synthetic corpus generation parameters."""

    seed: int = 7
    num_classes: int = Field(20, ge=1)
    num_radicals: int = Field(8, ge=1)
    train_writers: int = Field(20, ge=0)
    test_writers: int = Field(10, ge=0)
    train_lines_per_writer: int = Field(10, ge=0)
    adapt_lines_per_writer: int = Field(5, ge=0)
    test_lines_per_writer: int = Field(15, ge=0)
    min_line_length: int = Field(3, ge=1)
    max_line_length: int = Field(8, ge=1)
    min_occurrences: int = Field(5, ge=0)
    successors_per_class: int = Field(3, ge=1)
    successor_mass: float = Field(0.8, ge=0.0, le=1.0)
    line_height: int = Field(40, ge=8)
    max_gap: int = Field(4, ge=0)
    max_shear: float = Field(0.3, ge=0.0)
    scale_range: Tuple[float, float] = (0.8, 1.25)
    stroke_width_range: Tuple[float, float] = (1.0, 3.0)
    noise_sigma_range: Tuple[float, float] = (0.0, 0.08)


class FeatureSettings(BaseModel):
    """Sliding-window geometry."""

    window: int = Field(20, ge=8)
    shift: int = Field(4, ge=1)
    pool_grid: int = Field(8, ge=1)


class HmmSettings(BaseModel):
    """GMM-HMM topology and training schedule."""

    num_states: int = Field(5, ge=1)
    variance_floor: float = Field(1e-4, gt=0.0)
    first_iterations: int = Field(4, ge=0)
    second_iterations: int = Field(4, ge=0)
    tied_iterations: int = Field(2, ge=0)
    mixtures: int = Field(1, ge=1)
    training: Literal["baum_welch", "viterbi"] = "baum_welch"


class TyingSettings(BaseModel):
    """Decision-tree state tying."""

    avg_states: float = Field(3.0, ge=1.0)
    split_threshold: float = 0.0
    min_occupancy: float = Field(50.0, ge=0.0)
    question_depth: Optional[int] = Field(None, ge=1)


class ClassifierSettings(BaseModel):
    """Frame classifier architecture and training schedules."""

    seed: int = 11
    channels: Tuple[int, ...] = (16, 32)
    kernel_size: int = Field(3, ge=1)
    hidden_units: int = Field(128, ge=1)
    adapted_blocks: Optional[int] = Field(None, ge=0)
    code_dim: int = Field(200, ge=1)
    base_epochs: int = Field(3, ge=0)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    adapt_epochs: int = Field(2, ge=0)
    adapt_learning_rate: float = Field(0.001, gt=0.0)
    adapt_decay: float = Field(0.8, gt=0.0, le=1.0)
    adapt_decay_frames: int = Field(5_000_000, ge=1)
    test_epochs: int = Field(5, ge=0)
    test_learning_rate: float = Field(0.001, gt=0.0)
    code_init_std: float = Field(0.01, ge=0.0)
    prior_smoothing: float = Field(1.0, gt=0.0)


class LmSettings(BaseModel):
    """Character language models."""

    seed: int = 13
    order: int = Field(3, ge=1)
    rnn_hidden: int = Field(300, ge=1)
    rnn_epochs: int = Field(5, ge=0)
    bptt_steps: int = Field(8, ge=1)
    rnn_learning_rate: float = Field(0.01, gt=0.0)
    omega: float = Field(0.5, ge=0.0, le=1.0)


class DecodeSettings(BaseModel):
    """Viterbi beam search."""

    beam: Optional[int] = Field(256, ge=1)
    lm_scale: float = Field(1.0, ge=0.0)
    insertion_penalty: float = 0.0
    lm_mode: Literal["none", "ngram", "hybrid"] = "ngram"
    nbest: int = Field(10, ge=1)

    @field_validator("beam", mode="before")
    @classmethod
    def parse_unlimited_beam(cls, value: Any) -> Any:
        """Accept 'none'/'inf' (any case) as an unlimited beam."""
        if isinstance(value, str) and value.strip().lower() in {"none", "inf", "0"}:
            return None
        return value


class Settings(BaseSettings):
    """
    Pipeline settings.

    Attributes:
        app_name: Name used in manifests and log records.
        workdir: Root directory of every artifact.
        jobs: Upper bound on worker processes.
        passes: Number of decoding passes of the multi-pass recognizer.
        log_level: Logging level name.
        log_format: Logging format string.
    """

    # Application
    app_name: str = "phmm-recognizer"
    workdir: Path = Path("work")
    jobs: int = Field(1, ge=1)
    passes: int = Field(3, ge=1)

    # Modules
    corpus: CorpusSettings = CorpusSettings()
    features: FeatureSettings = FeatureSettings()
    hmm: HmmSettings = HmmSettings()
    tying: TyingSettings = TyingSettings()
    classifier: ClassifierSettings = ClassifierSettings()
    lm: LmSettings = LmSettings()
    decode: DecodeSettings = DecodeSettings()

    # Logging
    log_level: str = "INFO"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    model_config = SettingsConfigDict(
        env_prefix="PHMM_",
        env_nested_delimiter="__",
        case_sensitive=False,
        toml_file=None,
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        """Flags win over environment, environment wins over the config file."""
        return (init_settings, env_settings, TomlConfigSettingsSource(settings_cls))

    def configure_logging(self) -> None:
        """Apply log level and format to the root logger."""
        logging.basicConfig(
            level=getattr(logging, self.log_level.upper(), logging.INFO),
            format=self.log_format,
            force=True,
        )


def load_settings(config_file: Optional[Path] = None, **overrides: Any) -> Settings:
    """
    Build settings from an optional TOML file plus explicit overrides.

    Args:
        config_file: Path of a TOML config file, or None.
        **overrides: Values that take precedence over every other source.
            Nested sections are given as dicts and merged key by key.

    Returns:
        The resolved settings.
    """
    if config_file is None:
        return Settings(**overrides)

    class FileSettings(Settings):
        model_config = SettingsConfigDict(toml_file=Path(config_file))

    return FileSettings(**overrides)

