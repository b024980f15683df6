"""
Configuration module for SpotIQ.
Handles environment settings and loading of experiment configuration files.
"""

from pathlib import Path
from typing import Union

import torch
from dotenv import load_dotenv
from loguru import logger
from pydantic import ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigurationError
from .models import EvalSpec, TrainConfig

# Load environment variables from .env file
load_dotenv()


class Settings(BaseSettings):
    """Runtime settings taken from the environment."""

    # Device selection: auto, cpu, cuda or cuda:N
    device: str = "auto"

    # Logging Configuration
    log_level: str = "INFO"
    log_file: str = "logs/spotiq.log"

    # Torch runtime
    num_threads: int = 0
    deterministic: bool = True

    model_config = SettingsConfigDict(
        env_prefix="SPOTIQ_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("log_file")
    @classmethod
    def create_directories(cls, v):
        """Create the log directory if it doesn't exist."""
        path = Path(v)
        path.parent.mkdir(parents=True, exist_ok=True)
        return str(path)

    @field_validator("device")
    @classmethod
    def device_known(cls, v):
        v = v.strip().lower()
        if v not in ("auto", "cpu") and not v.startswith("cuda"):
            raise ValueError(f"unsupported device: {v}")
        return v

    def resolve_device(self) -> torch.device:
        """Turn the device setting into a torch device."""
        if self.device == "auto":
            return torch.device("cuda" if torch.cuda.is_available() else "cpu")
        if self.device.startswith("cuda") and not torch.cuda.is_available():
            logger.warning(f"Device {self.device} requested but CUDA is unavailable, using cpu")
            return torch.device("cpu")
        return torch.device(self.device)

    def apply_torch_runtime(self):
        """Apply thread count and determinism switches."""
        if self.num_threads > 0:
            torch.set_num_threads(self.num_threads)
        if self.deterministic:
            torch.use_deterministic_algorithms(True, warn_only=True)


def validation_error_fields(error: ValidationError) -> list[str]:
    """Dotted field paths of every violation in a pydantic error."""
    fields = []
    for item in error.errors():
        path = ".".join(str(part) for part in item.get("loc", ())) or "<root>"
        fields.append(path)
    return fields


def as_configuration_error(error: ValidationError, source: str) -> ConfigurationError:
    """Convert a pydantic ValidationError into a ConfigurationError naming each field."""
    details = []
    for item in error.errors():
        path = ".".join(str(part) for part in item.get("loc", ())) or "<root>"
        details.append(f"{path}: {item.get('msg')}")
    message = f"Invalid configuration in {source}: " + "; ".join(details)
    return ConfigurationError(message, fields=validation_error_fields(error))


def load_train_config(path: Union[str, Path]) -> TrainConfig:
    """
    Load and validate an experiment configuration file.

    Args:
        path: JSON file holding a TrainConfig

    Returns:
        Validated TrainConfig
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}", fields=["config"])

    try:
        config = TrainConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise as_configuration_error(e, str(path)) from e

    logger.debug(f"Loaded configuration from {path}")
    return config


def load_eval_spec(path: Union[str, Path]) -> EvalSpec:
    """Load an evaluation spec (tolerances, ranges, Soft-NMS settings) from JSON."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Eval config not found: {path}", fields=["eval"])

    try:
        spec = EvalSpec.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise as_configuration_error(e, str(path)) from e

    logger.debug(f"Loaded eval spec from {path}")
    return spec


def save_train_config(config: TrainConfig, path: Union[str, Path]) -> Path:
    """Write a configuration as indented JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def write_default_config(path: Union[str, Path], overwrite: bool = False) -> bool:
    """
    Write the desk-scale default configuration.

    Args:
        path: Destination JSON file
        overwrite: Replace an existing file

    Returns:
        True if the file was written, False if it already existed
    """
    path = Path(path)
    if path.exists() and not overwrite:
        logger.warning(f"{path} already exists, leaving it untouched")
        return False

    save_train_config(TrainConfig(), path)
    logger.info(f"Wrote default configuration to {path}")
    return True


# Global settings instance
settings = Settings()
