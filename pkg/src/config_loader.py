import os
import yaml
from pathlib import Path
from typing import Any, Dict, Optional
from dotenv import load_dotenv

from src.errors import ConfigurationError
from src.experiment_models import ExperimentConfig


SEED_ENV_VAR = "CONFMOE_SEED"


class ConfigLoader:
    """
    Loads an experiment document (YAML, or JSON which YAML reads as-is),
    substitutes ${VAR} references from the environment and materializes
    an ExperimentConfig.
    """

    def __init__(self, config_path: str = "config/config.yaml"):
        self.config_path = Path(config_path)
        self.config = self._load_config()
        self._load_environment_variables()

    def _load_config(self) -> Dict[str, Any]:
        if not self.config_path.exists():
            raise FileNotFoundError(f"Config file not found: {self.config_path}")

        with open(self.config_path, 'r', encoding='utf-8') as f:
            try:
                config = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigurationError(f"Cannot parse {self.config_path}: {e}")

        if config is None:
            return {}
        if not isinstance(config, dict):
            raise ConfigurationError(f"Config root must be a mapping: {self.config_path}")
        return config

    def _load_environment_variables(self):
        load_dotenv()

        self.config = self._replace_env_vars(self.config)

    def _replace_env_vars(self, obj: Any) -> Any:
        if isinstance(obj, dict):
            for key, value in obj.items():
                obj[key] = self._replace_env_vars(value)
        elif isinstance(obj, list):
            return [self._replace_env_vars(item) for item in obj]
        elif isinstance(obj, str) and obj.startswith('${') and obj.endswith('}'):
            env_var = obj[2:-1]
            value = os.getenv(env_var)
            if value is None:
                return obj
            # typed values so "${CONFMOE_EPOCHS}" can feed an int field
            return yaml.safe_load(value)
        return obj

    def get(self, key_path: str, default: Any = None) -> Any:
        keys = key_path.split('.')
        value = self.config

        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default

        return value

    def get_synth_config(self) -> Dict[str, Any]:
        return self._section('synth')

    def get_protocol_config(self) -> Dict[str, Any]:
        return self._section('protocol')

    def get_model_config(self) -> Dict[str, Any]:
        return self._section('model')

    def _section(self, name: str) -> Dict[str, Any]:
        """Copy of a top-level section; an empty (null) section reads as {}."""
        value = self.config.get(name)
        if value is None:
            return {}
        if not isinstance(value, dict):
            raise ConfigurationError(f"Section '{name}' must be a mapping, got {type(value).__name__}")
        return dict(value)

    def experiment_config(self, seed_override: Optional[int] = None,
                          seed_target: str = "model") -> ExperimentConfig:
        """
        Build the ExperimentConfig described by the loaded document.

        Args:
            seed_override: Seed from the command line; wins over everything else
            seed_target: Section whose seed the override applies to ("model" or "synth")

        Returns:
            Validated ExperimentConfig with every default materialized
        """
        if seed_target not in ("model", "synth"):
            raise ConfigurationError(f"Unknown seed target: {seed_target}")

        raw = dict(self.config)
        raw.update(synth=self.get_synth_config(), protocol=self.get_protocol_config(),
                   model=self.get_model_config())
        section = raw[seed_target]

        seed = resolve_seed(seed_override, section.get('seed'))
        if seed is not None:
            section['seed'] = seed

        return ExperimentConfig.from_dict(raw)


def resolve_seed(cli_seed: Optional[int], config_seed: Any) -> Optional[int]:
    """
    Seed precedence: command line, then config file, then CONFMOE_SEED.
    Returns None when no source sets a seed (the dataclass default applies).
    """
    if cli_seed is not None:
        return _as_seed(cli_seed, "--seed")
    if config_seed is not None:
        return _as_seed(config_seed, "config seed")

    load_dotenv()
    env_value = os.getenv(SEED_ENV_VAR)
    if env_value:
        return _as_seed(env_value, SEED_ENV_VAR)
    return None


def _as_seed(value: Any, source: str) -> int:
    try:
        seed = int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"Seed from {source} is not an integer: {value!r}")
    if seed < 0 or seed >= 2 ** 64:
        raise ConfigurationError(f"Seed from {source} must be an unsigned 64-bit integer: {seed}")
    return seed
