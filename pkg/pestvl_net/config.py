"""Configuration settings for PestVL-Net."""

import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from pydantic import ValidationError as PydanticValidationError
from pydantic_settings import BaseSettings

from .schemas.config import ModelConfig
from .utils.exceptions import ConfigError


class Settings(BaseSettings):
    """Runtime settings loaded from environment variables."""

    # MLLM captioning endpoint
    mllm_api_url: Optional[str] = None
    mllm_api_key: Optional[str] = None
    mllm_model_id: str = "gpt-4o"
    mllm_timeout_seconds: float = 60.0

    # Retry and concurrency for caption generation
    mllm_max_attempts: int = 3
    mllm_base_delay: float = 1.0
    mllm_max_delay: float = 30.0
    caption_concurrency: int = 4

    # Remote text encoder (optional; mock and file-backed encoders need nothing)
    text_encoder_api_url: Optional[str] = None
    text_encoder_timeout_seconds: float = 30.0

    # Logging Configuration
    log_level: str = "INFO"
    enable_json_logging: bool = False
    log_file: Optional[str] = None
    environment: str = "development"

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "extra": "ignore",
    }


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


def parse_override(override: str) -> tuple[str, Any]:
    """Split ``a.b.c=value``; the value is read as a JSON literal when possible."""
    if "=" not in override:
        raise ConfigError(f"Override '{override}' is not of the form key=value")
    key, raw = override.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override '{override}' has an empty key")
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply dotted-path overrides to a raw config mapping (copied, not mutated)."""
    result = json.loads(json.dumps(data))
    known = ModelConfig().model_dump()
    for override in overrides:
        key, value = parse_override(override)
        parts = key.split(".")
        node, schema = result, known
        for part in parts[:-1]:
            if not isinstance(schema, dict) or part not in schema:
                raise ConfigError(f"Unknown config key '{key}'", key=key)
            schema = schema[part]
            node = node.setdefault(part, {})
        if not isinstance(schema, dict) or parts[-1] not in schema:
            raise ConfigError(f"Unknown config key '{key}'", key=key)
        node[parts[-1]] = value
    return result


def load_model_config(
    path: Optional[str | Path] = None, overrides: Iterable[str] = ()
) -> ModelConfig:
    """
    Load a ModelConfig from a TOML file and dotted overrides.

    Raises:
        ConfigError: Unreadable file, unknown key or invalid value
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file {path} not found")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid TOML: {e}")

    data = apply_overrides(data, overrides)
    try:
        return ModelConfig.model_validate(data)
    except PydanticValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"Invalid config value for '{key}': {first['msg']}", key=key)
