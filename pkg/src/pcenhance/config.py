"""Run configuration files: INI-style sections mapped onto the config dataclasses.

    [train]      TrainConfig scalars (epochs, batch_size, lr_generator, ...)
    [generator]  GeneratorConfig
    [critic]     CriticConfig
    [loss]       LossConfig
    [data]       original / distorted / archive path lists (whitespace separated)

Values are parsed against the type of each field's default. Tuples are comma
separated; ``none`` clears an optional value.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .critic import CriticConfig
from .generator import GeneratorConfig
from .objectives import LossConfig
from .trainer import TrainConfig

NESTED = {"generator": GeneratorConfig, "critic": CriticConfig, "loss": LossConfig}
DATA_KEYS = ("original", "distorted", "archive")


class ConfigError(ValueError):
    pass


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(default, text: str):
    """Parse ``text`` into the type of ``default``."""
    text = text.strip()
    if text.lower() == "none":
        return None
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem = type(default[0]) if default else float
        return tuple(elem(p.strip()) for p in parts)
    if default is None:
        # optional integer (e.g. max_steps)
        try:
            return int(text)
        except ValueError:
            return float(text)
    return text


def _apply(section: str, cls, values: dict, current: dict) -> dict:
    known = _defaults(cls)
    for key, text in values.items():
        if key not in known or dataclasses.is_dataclass(known[key]):
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        try:
            current[key] = coerce(known[key], text)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return current


def build_config(sections: dict) -> tuple[TrainConfig, dict]:
    """``sections`` maps section name to {key: text}; returns (TrainConfig, data)."""
    unknown = set(sections) - {"train", "data", *NESTED}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    nested = {}
    for name, cls in NESTED.items():
        nested[name] = cls(**_apply(name, cls, sections.get(name, {}), {}))
    train_kw = _apply("train", TrainConfig, sections.get("train", {}), {})
    data = {}
    for key, text in sections.get("data", {}).items():
        if key not in DATA_KEYS:
            raise ConfigError(f"unknown key {key!r} in [data]")
        data[key] = text.split()
    return TrainConfig(**train_kw, **nested), data


def read_sections(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def merge_overrides(sections: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings on top of file sections."""
    out = {k: dict(v) for k, v in sections.items()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        out.setdefault(section.strip(), {})[key.strip()] = value
    return out


def load_config(path=None, overrides=()) -> tuple[TrainConfig, dict]:
    sections = read_sections(path) if path else {}
    return build_config(merge_overrides(sections, overrides))


def dump_config(cfg: TrainConfig) -> str:
    """Render ``cfg`` in the file format (round-trips through :func:`load_config`)."""
    d = cfg.to_dict()

    def fmt(v):
        if isinstance(v, (list, tuple)):
            return ", ".join(repr(x) for x in v)
        if v is None:
            return "none"
        return repr(v) if isinstance(v, float) else str(v)

    lines = ["[train]"]
    lines += [f"{k} = {fmt(v)}" for k, v in d.items() if k not in NESTED]
    for name in NESTED:
        lines += ["", f"[{name}]"]
        lines += [f"{k} = {fmt(v)}" for k, v in d[name].items()]
    return "\n".join(lines) + "\n"
