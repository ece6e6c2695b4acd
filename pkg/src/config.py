from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings

from .exceptions import ConfigError


class Settings(BaseSettings):
    # Project Information
    PROJECT_NAME: str = "SN-CBF Workbench"
    VERSION: str = "0.1.0"
    ENVIRONMENT: str = "development"

    # Execution
    DEFAULT_THREADS: int = 1
    OUTPUT_DIR: str = "runs"

    # OpenTelemetry Configuration
    OTLP_ENDPOINT: Optional[str] = None  # e.g. http://localhost:4318/v1/traces
    OTEL_CONSOLE_EXPORT: bool = False
    OTEL_SERVICE_NAME: str = "sncbf-workbench"
    OTEL_SERVICE_VERSION: str = "0.1.0"

    # Prometheus textfile written next to batch outputs
    METRICS_TEXTFILE: str = "metrics.prom"

    # Logging Configuration
    LOG_LEVEL: str = "INFO"
    DEBUG: bool = False

    class Config:
        env_file = ".env"
        case_sensitive = True

    @property
    def is_production(self) -> bool:
        """Check if running in production environment"""
        return self.ENVIRONMENT.lower() == "production"

    @property
    def is_development(self) -> bool:
        """Check if running in development environment"""
        return self.ENVIRONMENT.lower() == "development"


settings = Settings()


def parse_config_text(text: str, source: str = "<string>") -> Dict[str, Any]:
    """
    Parse line-oriented ``key = value`` text into a nested dict.

    ``#`` starts a comment, dotted keys nest (``train.gamma = 0.01``) and a
    value containing commas becomes a list of strings. Values stay strings;
    the pydantic models coerce them.
    """
    tree: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or any(not part for part in key.split(".")):
            raise ConfigError(f"{source}:{lineno}: malformed key {key!r}")

        parsed: Union[str, list] = value
        if "," in value:
            parsed = [item.strip() for item in value.split(",") if item.strip()]

        node = tree
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{source}:{lineno}: key {key!r} nests under a scalar")
            node = child
        if leaf in node:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        node[leaf] = parsed
    return tree


def load_experiment_config(path: Union[str, Path]):
    """Read and validate an experiment config file"""
    from .schemas.bench import ExperimentConfig

    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    tree = parse_config_text(text, source=str(path))
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e
