import os
from abc import abstractmethod
from pathlib import Path
from string import Template

import yaml
from thefuzz import process

from base_module.module import Module
from harness.experiment import ConfigError


def load_document(path) -> dict:
    """Read a JSON or YAML document, substituting ${VARS} from the environment first."""
    path = Path(path)
    try:
        with open(path, "r") as stream:
            config_template = Template(stream.read())
    except FileNotFoundError:
        raise ConfigError("config", f"config file not found: {path}")
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e}")
    config_string = config_template.safe_substitute(**os.environ)
    try:
        document = yaml.safe_load(config_string)
    except yaml.YAMLError as e:
        raise ConfigError("config", f"{path} is not valid JSON/YAML: {e}")
    if not isinstance(document, dict):
        raise ConfigError("config", f"{path} must hold a mapping at the top level")
    return document


def closest(word: str, choices) -> str:
    match = process.extractOne(str(word), list(choices))
    return match[0] if match else ""


def check_keys(section, known, path: str):
    if not isinstance(section, dict):
        raise ConfigError(path, f"expected a mapping, got {type(section).__name__}")
    for key in section:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, f"unknown key, did you mean {closest(key, known)!r}?")


def require(section: dict, key: str, path: str):
    try:
        return section[key]
    except KeyError:
        raise ConfigError(f"{path}.{key}" if path else key, "required field is missing")


class Importer(Module):
    def __init__(self, module_name, global_shared_state, log_level):
        super().__init__(module_name, global_shared_state, log_level)

    @abstractmethod
    def load_experiment(self, overrides: dict = None):
        pass
