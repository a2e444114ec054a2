"""TOML configuration for the fitting pipeline.

A config file holds a ``[pipeline]`` table whose keys are
:class:`artgauss.pipeline.PipelineConfig` fields, for example::

    [pipeline]
    lambda_geom = 0.01
    k_mobile = 3
    skip_phases = ["mobile-only"]
"""
from __future__ import annotations

import dataclasses
import sys
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .pipeline import PipelineConfig

_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


class ConfigError(ValueError):
    """Invalid configuration file or override."""


def _coerce(name: str, value: Any) -> Any:
    default = _FIELDS[name].default
    if name == "skip_phases":
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigError("skip_phases must be a list of phase names")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"{name} must be of type {type(default).__name__}")
    return value


def parse_config(doc: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Apply the ``[pipeline]`` table of a parsed TOML document to ``base``."""
    unknown_top = set(doc) - {"pipeline"}
    if unknown_top:
        raise ConfigError(f"unknown config tables {sorted(unknown_top)}")
    table = doc.get("pipeline", {})
    if not isinstance(table, dict):
        raise ConfigError("[pipeline] must be a table")
    return with_overrides(base or PipelineConfig(), table)


def with_overrides(base: PipelineConfig, overrides: dict) -> PipelineConfig:
    unknown = set(overrides) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown pipeline options {sorted(unknown)}")
    values = {k: _coerce(k, v) for k, v in overrides.items()}
    try:
        return dataclasses.replace(base, **values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, base: PipelineConfig | None = None) -> PipelineConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return parse_config(doc, base)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_to_dict(cfg: PipelineConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["skip_phases"] = list(cfg.skip_phases)
    return d
