"""
Runtime configuration.

Values come from the environment (optionally loaded from a local `.env`
file) with typed fallbacks. Command-line flags override these defaults.
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional

try:
    from dotenv import load_dotenv
    DOTENV_AVAILABLE = True
except ImportError:
    DOTENV_AVAILABLE = False

logger = logging.getLogger(__name__)

TOOL_NAME = "snowv-sca-lab"
TOOL_VERSION = "0.1.0"

DEFAULT_SEED = 2025
DEFAULT_JOBS = 1
DEFAULT_LOG_LEVEL = "INFO"
DEFAULT_OUT_DIR = "runs"


class ConfigError(ValueError):
    """Raised when an environment variable cannot be parsed."""


@dataclass(frozen=True)
class Settings:
    seed: int = DEFAULT_SEED
    jobs: int = DEFAULT_JOBS
    log_level: str = DEFAULT_LOG_LEVEL
    out_dir: str = DEFAULT_OUT_DIR


def _env_int(name: str, default: int, minimum: Optional[int] = None) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw, 0)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return value


def load_env_file(path: Optional[str] = None) -> bool:
    """Load a `.env` file if python-dotenv is installed. Existing variables win."""
    if not DOTENV_AVAILABLE:
        return False
    return load_dotenv(dotenv_path=path, override=False)


def get_settings() -> Settings:
    load_env_file()
    return Settings(
        seed=_env_int("SNOWV_SCA_SEED", DEFAULT_SEED, minimum=0),
        jobs=_env_int("SNOWV_SCA_JOBS", DEFAULT_JOBS, minimum=1),
        log_level=os.getenv("SNOWV_SCA_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper(),
        out_dir=os.getenv("SNOWV_SCA_OUT", DEFAULT_OUT_DIR),
    )
