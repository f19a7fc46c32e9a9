"""Plain-text ``key = value`` config files.

Blank lines and ``#`` comments are ignored.  Values are parsed as int, float,
bool (true/false/yes/no/on/off) or comma lists of those; anything else stays a
string.  Duplicate keys are an error so that typos do not silently win.
"""

from dataclasses import fields


class ConfigError(ValueError):
    pass


_TRUE = {"true", "yes", "on"}
_FALSE = {"false", "no", "off"}


def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def format_config(values):
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def build_dataclass(cls, values, strict=True):
    """Instantiate ``cls`` from the subset of ``values`` naming its fields."""
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(names))
    if strict and unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        if key not in names or value is None:
            continue
        kind = names[key].type
        if kind in (float, "float") and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind in (tuple, "tuple") and not isinstance(value, (list, tuple)):
            value = (value,)
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from None
