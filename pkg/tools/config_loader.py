"""
Configuration loader for solver runs.

Loads and validates a YAML run configuration, substitutes environment
variable references, applies ``--set key=value`` overrides and merges the
documented defaults underneath the user's values.
"""
import copy
import os
import re
from pathlib import Path

import yaml

from config.settings import DEFAULT_CONFIG_PATH, OUTPUT_ROOT
from utils.errors import ConfigError

SECTIONS = ("problem", "grid", "monte_carlo", "policy", "optimizer", "output", "regression", "verify", "benchmark")
REQUIRED_KEYS = ("problem.name", "grid.steps", "monte_carlo.paths", "monte_carlo.seed")

DEFAULTS = {
    "problem": {"params": {}},
    "grid": {},
    "monte_carlo": {},
    "policy": {"degree": 2, "lags": "auto"},
    "regression": {"degree": 2, "ridge": None},
    "optimizer": {
        "max_iters": 30,
        "tol": 1e-3,
        "initial_step": 1.0,
        "shrink": 0.5,
        "max_halvings": 20,
        "armijo": 1e-4,
    },
    "verify": {
        "fd_eps": [0.2, 0.1, 0.05],
        "order_eps": [0.4, 0.2, 0.1],
        "convexity_points": 10000,
        "gradient_samples": 50,
        "perturbation": 0.5,
        "sufficient": False,
        "residual_tol": 1e-2,
    },
    "benchmark": {"gap_tolerance_pct": 3.0},
    "output": {"dir": None, "dump_paths": False},
}

# Optional keys checked when present, by kind (see KIND_NAMES)
TYPED_KEYS = {
    "optimizer.max_iters": "count",
    "optimizer.max_halvings": "count",
    "optimizer.tol": "positive",
    "optimizer.initial_step": "positive",
    "optimizer.shrink": "positive",
    "optimizer.armijo": "positive",
    "policy.degree": "count0",
    "regression.degree": "count0",
    "verify.convexity_points": "count",
    "verify.gradient_samples": "count",
    "verify.perturbation": "number",
    "verify.sufficient": "flag",
    "verify.residual_tol": "positive",
    "benchmark.gap_tolerance_pct": "positive",
}
KIND_NAMES = {
    "count": "an integer >= 1",
    "count0": "an integer >= 0",
    "positive": "a number > 0",
    "number": "a number",
    "flag": "true or false",
}


def _has_kind(value, kind: str) -> bool:
    if kind == "flag":
        return isinstance(value, bool)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return False
    if kind == "count":
        return isinstance(value, int) and value >= 1
    if kind == "count0":
        return isinstance(value, int) and value >= 0
    if kind == "positive":
        return value > 0
    return True


def _process_env_var_references(value):
    """
    Process string values containing ${ENV_VAR} or ${ENV_VAR:default} patterns.

    Args:
        value: String potentially containing environment variable references

    Returns:
        Processed value; a string that is entirely one reference is parsed
        as a YAML scalar so numbers and booleans keep their types
    """
    if not isinstance(value, str):
        return value

    pattern = r'\${([A-Za-z0-9_]+)(?::([^}]*))?}'

    def replace_env_var(match):
        env_var = match.group(1)
        default = match.group(2)
        resolved = os.environ.get(env_var, default)
        if resolved is None:
            raise ConfigError(f"environment variable '{env_var}' is not set and has no default")
        return resolved

    if re.search(pattern, value):
        result = re.sub(pattern, replace_env_var, value)
        return yaml.safe_load(result) if result.strip() else result

    return value


def _process_config_item(item):
    """
    Recursively process configuration items, replacing environment variables.

    Args:
        item: Configuration item (can be dict, list, or scalar)

    Returns:
        Processed configuration with environment variables replaced
    """
    if isinstance(item, dict):
        return {k: _process_config_item(v) for k, v in item.items()}
    elif isinstance(item, list):
        return [_process_config_item(i) for i in item]
    else:
        return _process_env_var_references(item)


def _lookup(config: dict, dotted: str):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(dotted)
        node = node[part]
    return node


def _merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def validate_config_schema(config):
    """
    Validate the structure and data types of the run configuration.

    Args:
        config: The loaded configuration dictionary

    Returns:
        bool: True if valid

    Raises:
        ConfigError: If a required key is missing or a value has the wrong type
    """
    if not isinstance(config, dict):
        raise ConfigError("configuration must be a mapping")

    for section in config:
        if section not in SECTIONS:
            raise ConfigError(f"unknown section '{section}'")
        if not isinstance(config[section], dict):
            raise ConfigError(f"'{section}' must be a mapping")

    for key in REQUIRED_KEYS:
        try:
            _lookup(config, key)
        except KeyError:
            raise ConfigError(f"missing required key '{key}'") from None

    if not isinstance(config["problem"]["name"], str):
        raise ConfigError("'problem.name' must be a string")
    for key, minimum in (("grid.steps", 1), ("monte_carlo.paths", 1)):
        value = _lookup(config, key)
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            raise ConfigError(f"'{key}' must be an integer >= {minimum}")
    seed = config["monte_carlo"]["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("'monte_carlo.seed' must be an integer")

    params = config["problem"].get("params", {})
    if params is not None and not isinstance(params, dict):
        raise ConfigError("'problem.params' must be a mapping")
    lags = config.get("policy", {}).get("lags", "auto")
    if lags != "auto" and not (isinstance(lags, list) and all(isinstance(s, int) and s >= 1 for s in lags)):
        raise ConfigError("'policy.lags' must be 'auto' or a list of positive integers")
    for key in ("verify.fd_eps", "verify.order_eps"):
        try:
            eps = _lookup(config, key)
        except KeyError:
            continue
        if not isinstance(eps, list) or not eps or not all(isinstance(e, (int, float)) and 0 < e <= 1 for e in eps):
            raise ConfigError(f"'{key}' must be a non-empty list of values in (0, 1]")
    for key, kind in TYPED_KEYS.items():
        try:
            value = _lookup(config, key)
        except KeyError:
            continue
        if not _has_kind(value, kind):
            raise ConfigError(f"'{key}' must be {KIND_NAMES[kind]}, got {value!r}")

    return True


def apply_overrides(config: dict, overrides: list[str] | None) -> dict:
    """
    Apply ``key.path=value`` overrides; values are parsed as YAML scalars.

    Args:
        config: Configuration dictionary (not modified)
        overrides: Strings like ``monte_carlo.paths=20000``

    Returns:
        A new configuration dictionary

    Raises:
        ConfigError: If an override is not of the form ``key=value``
    """
    result = copy.deepcopy(config)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        node = result
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}' goes through a non-mapping value")
        node[parts[-1]] = yaml.safe_load(raw) if raw.strip() else None
    return result


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """
    Load, process, validate and complete a run configuration.

    Args:
        path: YAML file; defaults to the shipped LQG benchmark config
        overrides: ``--set`` strings applied after loading

    Returns:
        dict: Fully resolved configuration (defaults merged under user values)

    Raises:
        ConfigError: Unreadable file, invalid YAML or schema violation
    """
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    try:
        with open(path, "r", encoding="utf-8") as file:
            raw = yaml.safe_load(file) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None

    config = apply_overrides(_process_config_item(raw), overrides)
    validate_config_schema(config)
    resolved = _merge(DEFAULTS, config)
    if resolved["output"]["dir"] is None:
        resolved["output"]["dir"] = str(OUTPUT_ROOT / resolved["problem"]["name"])
    return resolved

