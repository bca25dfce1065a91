"""
Runtime configuration for capesynth.

Defaults come from the environment (optionally a .env file), a flat
key=value file can override them, and command-line flags override both.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

load_dotenv()


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{name} must be an integer, got {raw!r}")


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigurationError(f"{name} must be a number, got {raw!r}")


@dataclass(frozen=True)
class Settings:
    """Process-wide defaults read from CAPESYNTH_* environment variables"""

    seed: int = 42
    delta: float = 1e-5
    alpha_max: int = 200
    threads: int = 0
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "Settings":
        settings = cls(
            seed=_env_int("CAPESYNTH_SEED", cls.seed),
            delta=_env_float("CAPESYNTH_DELTA", cls.delta),
            alpha_max=_env_int("CAPESYNTH_ALPHA_MAX", cls.alpha_max),
            threads=_env_int("CAPESYNTH_THREADS", cls.threads),
            log_level=os.getenv("CAPESYNTH_LOG_LEVEL", cls.log_level).upper(),
        )
        logger.debug(f"🔧 Settings from environment: {settings}")
        return settings


def read_flat_config(path: str, allowed_keys: Iterable[str]) -> Dict[str, str]:
    """
    Read a flat key=value defaults file.

    Args:
        path: File to read
        allowed_keys: Flag destinations the calling subcommand accepts

    Returns:
        Mapping from flag destination (underscored) to raw string value
    """
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")

    allowed = set(allowed_keys)
    values = {}
    for key, value in dotenv_values(path).items():
        dest = key.strip().lstrip("-").replace("-", "_")
        if dest not in allowed:
            raise ConfigurationError(f"unknown key {key!r} in config file {path}")
        if value is None:
            raise ConfigurationError(f"key {key!r} in config file {path} has no value")
        values[dest] = value
    logger.info(f"📄 Loaded {len(values)} defaults from {path}")
    return values


def resolve_threads(threads: Optional[int]) -> int:
    """Map the 0 = auto convention onto a concrete worker count"""
    if threads is None or threads == 0:
        return os.cpu_count() or 1
    if threads < 0:
        raise ConfigurationError(f"threads must be >= 0, got {threads}")
    return threads


def read_key_values(path: str) -> Dict[str, str]:
    """Raw key=value pairs of a report file; keys without a value are dropped"""
    if not os.path.exists(path):
        raise ConfigurationError(f"file not found: {path}")
    return {key.strip(): value for key, value in dotenv_values(path).items() if value is not None}
