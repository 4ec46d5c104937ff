"""Human-readable ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Values are parsed as int, then
float, then comma-separated lists of those, falling back to strings.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict

from .errors import ConfigError


def _scalar(text: str) -> Any:
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str) -> Any:
    text = text.strip()
    if "," in text:
        return [_scalar(p.strip()) for p in text.split(",") if p.strip()]
    return _scalar(text)


def parse_config(text: str) -> Dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        out[key.strip().replace("-", "_")] = parse_value(value)
    return out


def load_config(path) -> Dict[str, Any]:
    try:
        return parse_config(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
