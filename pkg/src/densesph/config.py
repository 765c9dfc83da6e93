"""Flat ``key = value`` run configuration files.

Grammar: one ``key = value`` pair per line; ``#`` starts a comment that runs
to the end of the line; blank lines are ignored; keys are lowercase words
with ``_``. Values are kept as strings and converted by the reader.
"""
from __future__ import annotations

import re
from pathlib import Path

_KEY = re.compile(r"^[a-z][a-z0-9_]*$")


class ConfigFileError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigFileError(f"{source}:{lineno}: invalid key {key!r}")
        if key in out:
            raise ConfigFileError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigFileError(f"not a boolean: {value!r}")


def as_int_tuple(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.replace(",", " ").split())
