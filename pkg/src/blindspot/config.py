"""Flat `key = value` text format shared by config files, manifests, and
checkpoint headers. Serialization is canonical: keys sorted, one per line."""

from .errors import ConfigError


def dumps_kv(mapping):
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_kv(text):
    """Parse flat key=value text; blank lines and #-comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def as_int(mapping, key, default=None):
    return _convert(mapping, key, default, int, "an integer")


def as_float(mapping, key, default=None):
    return _convert(mapping, key, default, float, "a number")


def as_bool(mapping, key, default=None):
    def conv(v):
        if v not in ("true", "false"):
            raise ValueError(v)
        return v == "true"
    return _convert(mapping, key, default, conv, "'true' or 'false'")


def as_int_list(mapping, key, default=None):
    def conv(v):
        return tuple(int(part) for part in v.split(","))
    return _convert(mapping, key, default, conv, "comma-separated integers")


def _convert(mapping, key, default, conv, what):
    if key not in mapping:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return conv(mapping[key])
    except ValueError:
        raise ConfigError(f"key {key!r} must be {what}, got {mapping[key]!r}") from None
