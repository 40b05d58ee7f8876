"""
Flat structured-text configuration.

One `section.key = value` per line, `#` starts a comment. Sections map onto
frozen dataclasses; values are converted with the dataclass field types.
The same format is used for dataset manifests and checkpoint headers.
"""
import dataclasses
import enum
import logging
import typing
from pathlib import Path

from utils.errors import ConfigError

logger = logging.getLogger(__name__)


def parse_flat(text: str, source: str = "<config>") -> dict:
    """
    Parse flat `section.key = value` text.

    Args:
        text: Config text (UTF-8 decoded)
        source: Name used in error messages

    Returns:
        Ordered dict of "section.key" -> raw string value
    """
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key or key.startswith(".") or key.endswith("."):
            raise ConfigError(f"{source}:{lineno}: key {key!r} is not of the form section.key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def dump_flat(values: dict) -> str:
    return "".join(f"{key} = {value}\n" for key, value in values.items())


def read_flat_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_flat(text, source=str(path))


def group_sections(values: dict) -> dict:
    # "scene.clutter_min" -> {"scene": {"clutter_min": ...}}
    sections = {}
    for full_key, value in values.items():
        section, key = full_key.split(".", 1)
        sections.setdefault(section, {})[key] = value
    return sections


def format_value(value) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def _convert_scalar(raw: str, tp, key: str):
    if tp is bool:
        lowered = raw.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if tp is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if tp is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if tp is str:
        return raw
    if isinstance(tp, type) and issubclass(tp, tuple) and hasattr(tp, "_fields"):
        parts = [p for p in (s.strip() for s in raw.split(",")) if p]
        if len(parts) != len(tp._fields):
            raise ConfigError(f"{key}: expected {len(tp._fields)} comma separated numbers, got {raw!r}")
        return tp(*(_convert_scalar(p, float, key) for p in parts))
    if isinstance(tp, type):
        # Enums and other single-argument constructors
        try:
            return tp(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    raise ConfigError(f"{key}: unsupported field type {tp!r}")


def convert_value(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        item_type = args[0] if args else float
        parts = [p for p in (s.strip() for s in raw.split(",")) if p]
        return tuple(_convert_scalar(p, item_type, key) for p in parts)
    if origin is typing.Union:
        options = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return convert_value(raw, options[0], key)
    return _convert_scalar(raw, tp, key)


def build_section(cls, values: dict, section: str, required=()):
    """
    Build a config dataclass from the raw values of one section.

    Unknown keys and missing required keys raise ConfigError naming the key.
    """
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    for key in values:
        if key not in names:
            raise ConfigError(f"unknown config key '{section}.{key}'")
    for key in required:
        if key not in values:
            raise ConfigError(f"missing required config key '{section}.{key}'")

    kwargs = {key: convert_value(raw, hints[key], f"{section}.{key}") for key, raw in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{section}] section: {e}") from e


def section_to_flat(obj, section: str) -> dict:
    return {
        f"{section}.{f.name}": format_value(getattr(obj, f.name))
        for f in dataclasses.fields(obj)
        if f.init
    }
