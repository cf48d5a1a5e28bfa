#!/usr/bin/env python3
"""
Flat key=value run configuration.

Every TrainConfig and SyntheticSpec field is one key (SyntheticSpec.seed is
``data_seed``), plus ``preset``. Precedence: defaults < preset < file < flags.
"""

import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

from .dataio import SyntheticSpec
from .errors import ConfigError
from .trainer import DATASET_PRESETS, TrainConfig

logger = logging.getLogger(__name__)

PRESET_KEY = "preset"

KEY_HELP: Dict[str, str] = {
    "learning_rate": "Adam step size",
    "batch_size": "conversations per batch",
    "dropout": "dropout rate inside ECE, in [0, 1)",
    "lstm_layers": "stacked BiLSTM layers in ECE",
    "ece_heads": "heads of the global self-attention (must divide 2*d_u)",
    "ia_heads": "heads of IA-attention (must divide 4*d_u)",
    "alpha": "weight of the KL consistency term",
    "beta": "weight of the adversarial term",
    "epsilon": "FGV noise norm",
    "fgv_norm": "noise normalization: global or per_utterance",
    "distance_mode": "Gaussian distance: index or turn-taking",
    "scale_ia_logits": "scale IA-attention logits by 1/sqrt(head width)",
    "epochs": "maximum training epochs",
    "patience": "epochs without val improvement before stopping",
    "seed": "training seed (initialization, shuffling, dropout)",
    "grad_clip_norm": "global gradient norm cap",
    "precision": "float width for training: 32 or 64",
    "ablations": "comma-separated switches: no_ece, no_eae, no_kl, no_adv",
    "num_emotions": "synthetic: number of emotion classes",
    "num_speakers": "synthetic: speakers per corpus",
    "feature_dim": "synthetic: utterance feature width d_u",
    "conversations_per_split": "synthetic: train,val,test conversation counts",
    "length_range": "synthetic: min,max utterances per conversation",
    "cluster_separation": "synthetic: distance of emotion centres from the origin",
    "speaker_offset_scale": "synthetic: scale of per-speaker feature offsets",
    "emotion_transition_stickiness": "synthetic: probability an emotion persists to the next utterance",
    "data_seed": "synthetic: generator seed",
    PRESET_KEY: f"dataset preset: {', '.join(DATASET_PRESETS)}",
}

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_tuple(item: Callable[[str], Any]) -> Callable[[str], Tuple[Any, ...]]:
    def parse(text: str) -> Tuple[Any, ...]:
        return tuple(item(part.strip()) for part in text.split(",") if part.strip())
    return parse


def _parser_for(default: Any, tuple_item: Callable[[str], Any] = str) -> Callable[[str], Any]:
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _parse_tuple(type(default[0]) if default else tuple_item)
    return str


@dataclass(frozen=True)
class ConfigKey:
    name: str
    section: str
    attr: str
    default: Any
    parse: Callable[[str], Any]

    @property
    def help(self) -> str:
        return KEY_HELP.get(self.name, "")


def _build_keys() -> Dict[str, ConfigKey]:
    keys: Dict[str, ConfigKey] = {}
    train_defaults = TrainConfig()
    for f in fields(TrainConfig):
        default = getattr(train_defaults, f.name)
        keys[f.name] = ConfigKey(f.name, "train", f.name, default, _parser_for(default))
    data_defaults = SyntheticSpec()
    for f in fields(SyntheticSpec):
        name = "data_seed" if f.name == "seed" else f.name
        default = getattr(data_defaults, f.name)
        keys[name] = ConfigKey(name, "data", f.name, default, _parser_for(default))
    return keys


CONFIG_KEYS: Dict[str, ConfigKey] = _build_keys()


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    preset: Optional[str] = None

    def validate(self) -> None:
        self.train.validate()
        self.data.validate()

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {PRESET_KEY: self.preset}
        for name, key in CONFIG_KEYS.items():
            value = getattr(self.train if key.section == "train" else self.data, key.attr)
            flat[name] = list(value) if isinstance(value, tuple) else value
        return flat

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """
    Parse ``key = value`` lines.

    Blank lines and ``#`` comments are ignored. Unknown or repeated keys and
    lines without ``=`` raise ConfigError naming ``source`` and the line.
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key != PRESET_KEY and key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key '{key}'")
        values[key] = value
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text, source=str(path))


def parse_overrides(items: List[str]) -> Dict[str, str]:
    """``--set key=value`` items into a dict; unknown keys are errors."""
    values: Dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key != PRESET_KEY and key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = value
    return values


def _apply(config: RunConfig, values: Mapping[str, Any], origin: str) -> RunConfig:
    train_updates: Dict[str, Any] = {}
    data_updates: Dict[str, Any] = {}
    for name, raw in values.items():
        if name == PRESET_KEY:
            continue
        key = CONFIG_KEYS.get(name)
        if key is None:
            raise ConfigError(f"{origin}: unknown config key '{name}'")
        try:
            value = key.parse(raw) if isinstance(raw, str) else raw
        except ValueError as e:
            raise ConfigError(f"{origin}: bad value for '{name}': {e}") from e
        (train_updates if key.section == "train" else data_updates)[key.attr] = value
    return RunConfig(
        train=replace(config.train, **train_updates),
        data=replace(config.data, **data_updates),
        preset=config.preset,
    )


def build_run_config(file_values: Optional[Mapping[str, str]] = None,
                     overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Layer preset, file values and overrides over the defaults, then validate."""
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    preset = overrides.get(PRESET_KEY) or file_values.get(PRESET_KEY)
    config = RunConfig()
    if preset:
        preset = str(preset).lower()
        if preset not in DATASET_PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (expected one of {', '.join(DATASET_PRESETS)})")
        config = _apply(config, DATASET_PRESETS[preset], f"preset {preset}")
        config.preset = preset
    config = _apply(config, file_values, "config file")
    config = _apply(config, overrides, "command line")
    config.validate()
    logger.debug(f"Effective config: {config.to_flat()}")
    return config
