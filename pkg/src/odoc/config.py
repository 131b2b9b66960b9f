"""Layered settings: command-line flag > ``ODOC_*`` environment > config file > default."""

from __future__ import annotations

import os

import yaml

from .errors import ConfigError

ENV_PREFIX = "ODOC_"


def load_file(path):
    """Read a YAML (or JSON) mapping; ``None`` gives an empty mapping."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return d


def section(d, name):
    """``d[name]`` when the file groups keys by command, else the whole mapping
    minus other groups."""
    if name in d:
        sub = d[name]
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        return dict(sub)
    return {k: v for k, v in d.items() if not isinstance(v, dict) or k not in SECTIONS}


SECTIONS = ("synth", "extractor", "pretrain", "adapt", "predict", "report")


def env_values(keys, environ=None):
    """Values of ``ODOC_<KEY>`` for the given keys, parsed as YAML scalars."""
    environ = os.environ if environ is None else environ
    out = {}
    for k in keys:
        name = ENV_PREFIX + k.upper()
        if name in environ:
            try:
                out[k] = yaml.safe_load(environ[name])
            except yaml.YAMLError as e:
                raise ConfigError(f"{name}: {e}") from None
    return out


def merge(base, over):
    """Recursive dict merge; ``over`` wins."""
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve(defaults, file=None, env=None, flags=None):
    """Apply the layers in increasing precedence; ``None`` flags are unset."""
    out = merge(defaults, file or {})
    out = merge(out, env or {})
    return merge(out, {k: v for k, v in (flags or {}).items() if v is not None})
