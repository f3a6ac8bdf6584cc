"""TOML run configuration with line-precise errors.

A config has a ``[run]`` section naming the ``kind`` of run and one section
per component.  Errors raise :class:`ConfigError` carrying the offending key
and, when it can be located, the line it sits on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

RUN_KINDS = ("offpolicy", "safety", "onpolicy", "game", "tournament", "exploit", "oracle")

REQUIRED = {
    "offpolicy": [("env", "name"), ("algo", "variant")],
    "safety": [("env", "name"), ("algo", "variant")],
    "onpolicy": [("env", "name"), ("algo", "variant")],
    "game": [("game", "kind"), ("algo", "variant")],
    "tournament": [("tournament", "env"), ("tournament", "controllers"), ("tournament", "disturbances")],
    "exploit": [("exploit", "controller"), ("env", "name"), ("algo", "variant")],
    "oracle": [("env", "name")],
}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None, path=None):
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(f"{where}{message}")
        self.key = key
        self.line = line


def locate(text: str, dotted: str) -> int | None:
    """Line number (1-based) where ``section.key`` is assigned, or where its section starts."""
    *section, key = dotted.split(".")
    current = ""
    header_line = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        m = re.match(r"^\[+\s*([^\]]+?)\s*\]+$", line)
        if m:
            current = m.group(1)
            if current == ".".join(section + [key]):
                return i
            if current == ".".join(section):
                header_line = i
            continue
        if current == ".".join(section) and re.match(rf"^{re.escape(key)}\s*=", line):
            return i
    return header_line


@dataclass
class RunConfig:
    data: dict
    text: str
    path: Path | None = None

    @property
    def kind(self) -> str:
        return self.data["run"]["kind"]

    def section(self, name: str) -> dict:
        return dict(self.data.get(name, {}))

    def get(self, dotted: str, default=None):
        node: Any = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def error(self, message: str, key: str) -> ConfigError:
        return ConfigError(message, key, locate(self.text, key), self.path)


def parse_config(text: str, path=None) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", None, int(m.group(1)) if m else None, path) from None
    cfg = RunConfig(data, text, Path(path) if path else None)
    if "run" not in data or "kind" not in data["run"]:
        raise ConfigError("missing required key 'run.kind'", "run.kind", locate(text, "run.kind"), path)
    kind = data["run"]["kind"]
    if kind not in RUN_KINDS:
        raise cfg.error(f"run.kind must be one of {RUN_KINDS}, got {kind!r}", "run.kind")
    for section, key in REQUIRED[kind]:
        if cfg.get(f"{section}.{key}") is None:
            raise cfg.error(f"missing required key '{section}.{key}'", f"{section}.{key}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=path) from None
    return parse_config(text, path)


def build_dataclass(cls, cfg: RunConfig, section: str, extra: dict | None = None, convert: dict | None = None):
    """Instantiate ``cls`` from a config section, rejecting unknown keys with their line."""
    values = dict(cfg.section(section))
    known = {f.name for f in fields(cls)}
    for k in values:
        if k not in known:
            raise cfg.error(f"unknown key '{section}.{k}'", f"{section}.{k}")
    for k, fn in (convert or {}).items():
        if k in values:
            try:
                values[k] = fn(values[k])
            except (TypeError, ValueError) as exc:
                raise cfg.error(f"bad value for '{section}.{k}': {exc}", f"{section}.{k}") from None
    values.update(extra or {})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}", section, locate(cfg.text, section + ".x"),
                          cfg.path) from None
