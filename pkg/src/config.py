"""
Configuration loader for framework settings
Loads settings from settings.json and environment variables
Priority: Environment Variables > settings.json > Defaults
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from src.errors import ConfigError

# Load .env file if it exists
load_dotenv()

CACHE_DIR_ENV = "DIFFTOX_CACHE_DIR"
HUB_URL_ENV = "DIFFTOX_HUB_URL"
LOG_LEVEL_ENV = "DIFFTOX_LOG_LEVEL"

DEFAULT_SETTINGS: Dict[str, Dict[str, Any]] = {
    "cache": {"dir": str(Path.home() / ".cache" / "difftox")},
    "hub": {
        "base_url": "",
        "fetch_workers": 4,
        "request_timeout": 60,
        "retry_attempts": 3,
    },
    "optimizer": {"command": [], "timeout": 600},
    "runner": {"command": [], "timeout": 600, "max_new_tokens": 64},
    "localizer": {"workers": None, "sample_size": 50, "seed": 0},
    "logging": {"level": "INFO"},
}


class Config:
    """Load and manage framework configuration"""

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize configuration

        Args:
            config_path: Path to settings.json. If None, searches the project
                root and the current working directory; defaults apply when
                no file is found.
        """
        if config_path is None:
            possible_paths = [
                Path(__file__).parent.parent / "settings.json",
                Path.cwd() / "settings.json",
            ]
            for path in possible_paths:
                if path.exists():
                    config_path = str(path)
                    break
        elif not os.path.exists(config_path):
            raise ConfigError(f"settings file not found at {config_path}")

        self.config_path = config_path
        self.settings = self._load_settings()

    def _load_settings(self) -> Dict[str, Any]:
        """
        Load settings from JSON file merged over the defaults

        Returns:
            Dictionary of settings
        """
        merged = {section: dict(values) for section, values in DEFAULT_SETTINGS.items()}
        if self.config_path is None:
            return merged
        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in {self.config_path}: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"{self.config_path} must contain a JSON object")
        for section, values in loaded.items():
            if isinstance(values, dict):
                merged.setdefault(section, {}).update(values)
            else:
                merged[section] = values
        return merged

    def _section(self, name: str) -> Dict[str, Any]:
        return self.settings.get(name, {})

    def get_cache_dir(self) -> Path:
        """Get model cache root; DIFFTOX_CACHE_DIR overrides settings.json"""
        env_dir = os.getenv(CACHE_DIR_ENV)
        if env_dir:
            return Path(env_dir).expanduser()
        return Path(self._section("cache").get("dir")).expanduser()

    def get_hub_base_url(self) -> str:
        return os.getenv(HUB_URL_ENV) or self._section("hub").get("base_url", "")

    def get_fetch_workers(self) -> int:
        """Get bound on concurrent hub fetches"""
        return int(self._section("hub").get("fetch_workers", 4))

    def get_request_timeout(self) -> float:
        return float(self._section("hub").get("request_timeout", 60))

    def get_retry_attempts(self) -> int:
        """Get number of retry attempts for hub requests"""
        return int(self._section("hub").get("retry_attempts", 3))

    def get_optimizer_command(self) -> List[str]:
        return list(self._section("optimizer").get("command", []))

    def get_optimizer_timeout(self) -> float:
        """Get timeout per optimizer invocation in seconds"""
        return float(self._section("optimizer").get("timeout", 600))

    def get_runner_command(self) -> List[str]:
        return list(self._section("runner").get("command", []))

    def get_runner_timeout(self) -> float:
        return float(self._section("runner").get("timeout", 600))

    def get_max_new_tokens(self) -> int:
        return int(self._section("runner").get("max_new_tokens", 64))

    def get_workers(self) -> int:
        """Get sweep parallelism; defaults to the number of processor cores"""
        workers = self._section("localizer").get("workers")
        return int(workers) if workers else (os.cpu_count() or 1)

    def get_sample_size(self) -> int:
        return int(self._section("localizer").get("sample_size", 50))

    def get_seed(self) -> int:
        return int(self._section("localizer").get("seed", 0))

    def get_log_level(self) -> str:
        return (os.getenv(LOG_LEVEL_ENV) or self._section("logging").get("level", "INFO")).upper()


# Global config instance
_config = None


def get_config(config_path: Optional[str] = None) -> Config:
    """
    Get global configuration instance

    Args:
        config_path: Optional path to settings.json

    Returns:
        Config instance
    """
    global _config
    if _config is None:
        _config = Config(config_path)
    return _config


def reload_config(config_path: Optional[str] = None) -> Config:
    """
    Reload configuration

    Args:
        config_path: Optional path to settings.json
    """
    global _config
    _config = Config(config_path)
    return _config
