"""Configuration documents: loading, dotted-key overrides, canonical hashing.

A configuration is a plain nested mapping (YAML on disk).  Hashing runs over
the canonical JSON form (sorted keys, no whitespace), so formatting and key
order never change a run's identity.
"""

from __future__ import annotations

import copy
import hashlib
import json

import yaml


class ConfigError(ValueError):
    """Malformed document or override."""


def load_config(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: configuration must be a mapping")
    return doc


def save_config(path, doc: dict):
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def canonical(doc: dict) -> str:
    """Whitespace- and ordering-insensitive serialized form."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict) -> str:
    return hashlib.sha256(canonical(doc).encode()).hexdigest()


def short_hash(doc: dict) -> str:
    return config_hash(doc)[:12]


def get_key(doc: dict, dotted: str):
    node = doc
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown configuration key '{dotted}'")
        node = node[part]
    return node


def set_key(doc: dict, dotted: str, value):
    """Replace an existing leaf; new keys cannot be invented by override."""
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown configuration key '{dotted}'")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown configuration key '{dotted}'")
    node[parts[-1]] = value


def apply_overrides(doc: dict, pairs) -> dict:
    """New document with each `key.path=value` applied (YAML-typed values)."""
    out = copy.deepcopy(doc)
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not of the form key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as err:
            raise ConfigError(f"override '{pair}': unparsable value") from err
        set_key(out, key, value)
    return out
