"""Flat `key = value` run configuration.

Files hold one dotted key per line (`train.lr = 0.001`), with `#` comments
and blank lines ignored. Keys group into sections by their first dotted
component; section contents are applied onto the package's config
dataclasses, coercing each value from the type of the field's default.
Command-line overrides use the same `key=value` grammar and are applied
after the file, winning on conflict.
"""

from dataclasses import MISSING, fields
from pathlib import Path

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    """Malformed configuration text or an unknown/untypable key."""


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Parse to a flat {dotted_key: raw_value} dict; duplicates are errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}: line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if not key or not all(part.isidentifier() for part in key.split(".")):
            raise ConfigError(f"{origin}: line {lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}: line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    path = Path(path)
    return parse_config_text(path.read_text(), origin=str(path))


def apply_overrides(flat: dict[str, str], overrides) -> dict[str, str]:
    """Apply `key=value` strings on top of a parsed config (repeats allowed,
    later wins)."""
    out = dict(flat)
    for i, item in enumerate(overrides or []):
        if "=" not in item:
            raise ConfigError(f"override {i}: expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if not key or not all(part.isidentifier() for part in key.split(".")):
            raise ConfigError(f"override {i}: bad key {key!r}")
        out[key] = value.strip()
    return out


def pop_section(flat: dict[str, str], prefix: str) -> dict[str, str]:
    """Remove and return `prefix.*` keys, stripped of the prefix."""
    out = {}
    for key in list(flat):
        if key.startswith(prefix + "."):
            out[key[len(prefix) + 1:]] = flat.pop(key)
    return out


def _coerce(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, str):
            return text
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if not parts:
                raise ValueError("empty tuple")
            return tuple(elem(p) for p in parts)
        if default is None:
            # optional scalars: 'none' clears, anything else is numeric
            if text.lower() in ("none", ""):
                return None
            return float(text)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}: {exc}") from exc
    raise ConfigError(f"{key}: this field cannot be set from text")


def build_dataclass(cls, section: dict[str, str], origin: str = ""):
    """Instantiate a config dataclass from a section dict.

    Every key must name a field of cls; values coerce from the type of the
    field's default. Fields without defaults cannot be set this way.
    """
    known = {}
    for f in fields(cls):
        if f.default is not MISSING:
            known[f.name] = f.default
        elif f.default_factory is not MISSING:  # type: ignore[misc]
            known[f.name] = f.default_factory()  # type: ignore[misc]
    kwargs = {}
    label = origin or cls.__name__
    for key, text in section.items():
        if key not in known:
            raise ConfigError(f"{label}: unknown key {key!r}; valid keys: {', '.join(sorted(known))}")
        kwargs[key] = _coerce(f"{label}.{key}", text, known[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{label}: {exc}") from exc
