import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigError
from app.models.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

# Tables that may group keys in a config file; they are flattened
CONFIG_SECTIONS = ("data", "model", "block", "mixup", "optim", "run")


class Settings(BaseSettings):
    """Process-wide settings read from the environment (and `.env`)"""
    model_config = SettingsConfigDict(env_prefix="CMAMBA_", env_file=".env", extra="ignore")

    output_root: str = "runs"
    log_level: str = "INFO"
    checkpoint: Optional[str] = None


@lru_cache
def get_settings() -> Settings:
    return Settings()


def parse_override(item: str) -> tuple[str, Any]:
    """Parse `key=value`; the value is read as a TOML literal, else kept as a string"""
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got '{item}'")
    key, raw = item.split("=", 1)
    key, raw = key.strip(), raw.strip()
    if not key:
        raise ConfigError(f"override has an empty key: '{item}'")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def flatten_sections(document: Dict[str, Any]) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in document.items():
        if isinstance(value, dict):
            if key not in CONFIG_SECTIONS:
                raise ConfigError(f"unknown config section [{key}]")
            for inner_key, inner_value in value.items():
                if inner_key in flat:
                    raise ConfigError(f"key '{inner_key}' is set more than once")
                flat[inner_key] = inner_value
        else:
            if key in flat:
                raise ConfigError(f"key '{key}' is set more than once")
            flat[key] = value
    return flat


def build_config(values: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from e


def load_experiment_config(
    path: Optional[str | Path] = None,
    overrides: Iterable[str] = (),
) -> ExperimentConfig:
    """Resolve defaults <- config file <- overrides into one ExperimentConfig"""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            document = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"cannot parse config file {path}: {e}") from e
        values = flatten_sections(document)
        logger.info(f"Loaded {len(values)} config keys from {path}")

    for item in overrides:
        key, value = parse_override(item)
        values[key] = value

    return build_config(values)


def _toml_value(value: Any) -> str:
    if isinstance(value, Enum):
        value = value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot write value {value!r} to a config file")


def dump_config(config: ExperimentConfig) -> str:
    """Flat `key = value` echo of a resolved config; unset optional keys are omitted"""
    lines = []
    for key, value in config.model_dump().items():
        if value is None:
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"
