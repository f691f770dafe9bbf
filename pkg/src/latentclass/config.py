"""Flat key=value run configuration.

Config files hold one `key = value` pair per line; `#` starts a comment.
Keys are dotted paths (e.g. `cau.pooling`). Values stay strings until a
typed getter parses them, so unknown keys round-trip untouched and the
digest is stable across readers.
"""

from __future__ import annotations

import hashlib
from typing import Dict, List, Optional


class ConfigError(ValueError):
    """A config key is missing, malformed, or out of range."""


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    cfg: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in cfg:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        cfg[key] = value
    return cfg


def load_config(path: str) -> Dict[str, str]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), source=path)


def apply_overrides(cfg: Dict[str, str], overrides: List[str]) -> Dict[str, str]:
    """Apply `key=value` strings on top of a config (last one wins)."""
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_digest(cfg: Dict[str, str]) -> str:
    """sha256 over the canonical serialization (sorted keys, key=value lines)."""
    canon = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def dump_config(cfg: Dict[str, str]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


# -- typed getters ------------------------------------------------------------


def get_str(cfg: Dict[str, str], key: str, default: Optional[str] = None,
            choices: Optional[List[str]] = None) -> str:
    if key in cfg:
        v = cfg[key]
    elif default is not None:
        v = default
    else:
        raise ConfigError(f"missing required config key {key!r}")
    if choices is not None and v not in choices:
        raise ConfigError(f"config key {key!r}: {v!r} not in {choices}")
    return v


def get_int(cfg: Dict[str, str], key: str, default: Optional[int] = None,
            lo: Optional[int] = None, hi: Optional[int] = None) -> int:
    if key in cfg:
        try:
            v = int(cfg[key])
        except ValueError:
            raise ConfigError(f"config key {key!r}: {cfg[key]!r} is not an integer") from None
    elif default is not None:
        v = default
    else:
        raise ConfigError(f"missing required config key {key!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"config key {key!r}: {v} below minimum {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"config key {key!r}: {v} above maximum {hi}")
    return v


def get_float(cfg: Dict[str, str], key: str, default: Optional[float] = None,
              lo: Optional[float] = None, hi: Optional[float] = None) -> float:
    if key in cfg:
        try:
            v = float(cfg[key])
        except ValueError:
            raise ConfigError(f"config key {key!r}: {cfg[key]!r} is not a number") from None
    elif default is not None:
        v = float(default)
    else:
        raise ConfigError(f"missing required config key {key!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"config key {key!r}: {v} below minimum {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"config key {key!r}: {v} above maximum {hi}")
    return v


def get_bool(cfg: Dict[str, str], key: str, default: Optional[bool] = None) -> bool:
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    v = cfg[key].lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key {key!r}: {cfg[key]!r} is not a boolean")


def get_int_list(cfg: Dict[str, str], key: str, default: Optional[List[int]] = None,
                 sep: str = "/") -> List[int]:
    """Parse a separator-joined integer list such as feu.n = 2/3/4."""
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return list(default)
    try:
        return [int(tok) for tok in cfg[key].split(sep)]
    except ValueError:
        raise ConfigError(
            f"config key {key!r}: {cfg[key]!r} is not a {sep!r}-separated integer list"
        ) from None
