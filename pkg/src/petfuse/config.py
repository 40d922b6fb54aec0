"""JSON config loading with typo protection and flag > file > default
precedence. The effective config is echoed into output directories.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .errors import ConfigError
from .fusion import FusionConfig
from .pet import AdapterConfig, LoRAConfig
from .training import TrainConfig

_SECTION_TYPES = {
    "fusion": FusionConfig,
    "train": TrainConfig,
    "lora": LoRAConfig,
    "adapter": AdapterConfig,
}

_TOP_LEVEL_SCALARS = {
    "policy": "frozen",
    "arm": "full_pet",
    "total_params_declared": None,
}


def _build_section(cls, values: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - fields
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Effective config dict with dataclass sections filled from defaults,
    then the JSON file, then explicit overrides (flags)."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg})") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - set(_SECTION_TYPES) - set(_TOP_LEVEL_SCALARS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    cfg = {}
    for name, cls in _SECTION_TYPES.items():
        section = dict(doc.get(name, {}))
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        for key, value in (overrides or {}).get(name, {}).items():
            section[key] = value
        cfg[name] = _build_section(cls, section)
    for name, default in _TOP_LEVEL_SCALARS.items():
        cfg[name] = doc.get(name, default)
        if overrides and name in overrides:
            cfg[name] = overrides[name]
    return cfg


def echo_config(cfg: dict, out_dir):
    doc = {}
    for key, value in cfg.items():
        doc[key] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
    path = Path(out_dir) / "config.echo.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=list) + "\n",
                    encoding="utf-8")
