"""Run configuration: one aggregate of every tunable, with a flat text format.

Config files are lines of ``section.key = value``. Values layer in order
default < config file < environment (``TGD_SECTION_KEY``) < command-line
flag, and the effective config echoes back out as a valid config file.
"""
from __future__ import annotations

import os
import types
import typing
from dataclasses import dataclass, field, fields, replace

from .data import AugmentSettings
from .evaluation import EvalSpec
from .losses import LossWeights
from .modalities import ClipSamplingSpec
from .model import BackboneConfig
from .trainer import TrainConfig

ENV_PREFIX = "TGD_"


@dataclass
class DataPaths:
    train_manifest: str = ""
    test_manifest: str = ""
    labeled_per_class: int = 0       # 0 = use labeled_ratio instead
    labeled_ratio: float = 0.1
    balanced: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    data: DataPaths = field(default_factory=DataPaths)
    clip: ClipSamplingSpec = field(default_factory=lambda: ClipSamplingSpec(
        frames_per_clip=4, frame_stride=4, tg_stride=1, clips_per_video_eval=4))
    augment: AugmentSettings = field(default_factory=lambda: AugmentSettings(
        short_side=40, crop_size=32))
    model: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=lambda: EvalSpec(
        clips_per_video=4, crops_per_clip=3, crop_size=36))

    def backbone_for(self, num_classes: int) -> BackboneConfig:
        return replace(self.model, num_classes=num_classes)


_SECTIONS = ("data", "clip", "augment", "model", "loss", "train", "eval")
_TOP_FIELDS = ("seed", "out_dir")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "on", "yes"):
        return True
    if lowered in ("false", "0", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(text: str, annotation) -> object:
    text = text.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if annotation is bool:
        return _parse_bool(text)
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if annotation is str:
        return text
    if origin in (typing.Union, types.UnionType):
        non_none = [a for a in args if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _parse_value(text, non_none[0])
    if origin is tuple:
        elem = args[0]
        if not text:
            return ()
        return tuple(_parse_value(part, elem) for part in text.split(","))
    raise ValueError(f"unsupported config field type {annotation}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _field_registry() -> dict[str, tuple[str, str, object]]:
    """dotted key -> (section, field name, resolved type annotation)."""
    registry: dict[str, tuple[str, str, object]] = {}
    for name in _TOP_FIELDS:
        hints = typing.get_type_hints(RunConfig)
        registry[name] = ("", name, hints[name])
    for section in _SECTIONS:
        section_type = typing.get_type_hints(RunConfig)[section]
        hints = typing.get_type_hints(section_type)
        for f in fields(section_type):
            registry[f"{section}.{f.name}"] = (section, f.name, hints[f.name])
    return registry


CONFIG_KEYS = _field_registry()


def flatten_config(config: RunConfig) -> dict[str, str]:
    out = {}
    for key, (section, name, _) in CONFIG_KEYS.items():
        holder = getattr(config, section) if section else config
        out[key] = _format_value(getattr(holder, name))
    return out


def config_to_text(config: RunConfig) -> str:
    lines = [f"{key} = {value}" for key, value in sorted(flatten_config(config).items())]
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for key in CONFIG_KEYS:
        env_key = ENV_PREFIX + key.upper().replace(".", "_")
        if env_key in environ:
            out[key] = environ[env_key]
    return out


def apply_overrides(config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """New RunConfig with ``overrides`` (dotted key -> raw string) applied."""
    staged: dict[str, dict[str, object]] = {}
    top: dict[str, object] = {}
    for key, raw in overrides.items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        section, name, annotation = CONFIG_KEYS[key]
        value = _parse_value(raw, annotation)
        if section:
            staged.setdefault(section, {})[name] = value
        else:
            top[name] = value
    updates: dict[str, object] = dict(top)
    for section, kv in staged.items():
        updates[section] = replace(getattr(config, section), **kv)
    return replace(config, **updates)


def build_run_config(file_text: str | None = None, flag_overrides: dict[str, str] | None = None,
                     environ=None) -> RunConfig:
    config = RunConfig()
    if file_text is not None:
        config = apply_overrides(config, parse_config_text(file_text))
    config = apply_overrides(config, env_overrides(environ))
    if flag_overrides:
        config = apply_overrides(config, flag_overrides)
    return config
