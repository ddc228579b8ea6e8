"""``key = value`` config files mapped onto dataclasses."""
import dataclasses
import typing

from .errors import ContractError, ParseError


def parse_kv(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        out[key] = value
    return out


def _coerce(value, typ, key):
    if typing.get_origin(typ) is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if value.lower() in ("none", ""):
            return None
        typ = args[0]
    try:
        if typ is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return str(value)
    except ValueError:
        raise ContractError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None


def build(cls, values, base=None):
    """Instantiate ``cls`` from string values; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ContractError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = dataclasses.asdict(base) if base is not None else {}
    for k, v in values.items():
        kwargs[k] = _coerce(v, hints[k], k) if isinstance(v, str) else v
    return cls(**kwargs)


def split_known(cls, values):
    names = {f.name for f in dataclasses.fields(cls)}
    return {k: v for k, v in values.items() if k in names}


def dumps(obj):
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        elif v is None:
            v = "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
