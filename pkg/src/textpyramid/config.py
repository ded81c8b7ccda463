"""Flat key-value run configuration files.

Format: one ``key = value`` per line, ``#`` comments and blank lines
allowed.  Each command declares its schema; keys outside the schema are
rejected by name so typos surface immediately.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Callable

__all__ = [
    "ConfigError",
    "read_config_file",
    "parse_config_text",
    "apply_schema",
    "parse_bool",
    "parse_int_tuple",
]


class ConfigError(ValueError):
    """Malformed config text or a key the command does not accept."""


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {number}: empty key")
        if key in out:
            raise ConfigError(f"line {number}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def parse_int_tuple(value: str) -> tuple[int, ...]:
    parts = [p.strip() for p in value.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated integer list")
    return tuple(int(p) for p in parts)


def apply_schema(raw: dict[str, str],
                 schema: dict[str, Callable[[str], Any]]) -> dict[str, Any]:
    """Parse raw strings through the schema; unknown keys are named."""
    out: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config key: {key}")
        try:
            out[key] = schema[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config key {key}: {exc}") from None
    return out
