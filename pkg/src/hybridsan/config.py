"""Experiment configuration: strict JSON <-> dataclasses."""

from __future__ import annotations

import dataclasses
import enum
import json
import re
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .decoder import TokenVocab
from .encoder import EncoderConfig, LayerKind
from .model import ModelConfig
from .training import SynthTaskSpec, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending dotted path."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class DataConfig:
    synthetic: Optional[SynthTaskSpec] = field(default_factory=SynthTaskSpec)
    feature_dir: Optional[str] = None  # external features; overrides synthetic for training
    valid_dir: Optional[str] = None
    valid_utterances: int = 200
    seed: int = 1


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs"

    def validate(self) -> None:
        enc, syn = self.model.encoder, self.data.synthetic
        if self.data.feature_dir is None and syn is None:
            raise ConfigError("data", "needs either synthetic or feature_dir")
        if syn is not None and self.data.feature_dir is None:
            n_vocab = len(TokenVocab.synthetic(syn.vocab_size))
            if self.model.vocab_size != n_vocab:
                raise ConfigError("model.vocab_size", f"is {self.model.vocab_size} but the synthetic "
                                  f"task needs {n_vocab} (content tokens + 4 specials)")
            if enc.input_dim != syn.feat_dim:
                raise ConfigError("model.encoder.input_dim",
                                  f"is {enc.input_dim} but data feat_dim is {syn.feat_dim}")

    def vocab(self) -> TokenVocab:
        return TokenVocab.synthetic(self.model.vocab_size - 4)


def _build(tp: Any, value: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _build(args[0], value, key)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        (inner,) = typing.get_args(tp)
        return [_build(inner, v, f"{key}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected an object, got {value!r}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp) if f.init}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{key}.{unknown[0]}" if key else unknown[0], "unknown key")
        kwargs = {k: _build(hints[k], v, f"{key}.{k}" if key else k) for k, v in value.items()}
        try:
            return tp(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(key or "<root>", str(exc)) from None
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(key, f"invalid value {value!r}") from None
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    raise ConfigError(key, f"unsupported field type {tp}")


def to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def from_dict(d: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, d, "")
    cfg.validate()
    return cfg


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def load_config(path: str | Path, overrides: list[str] = (), layers: str | None = None,
                seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"{path} is not valid JSON ({exc})") from None
    return resolve(raw, overrides, layers, seed)


def resolve(raw: dict, overrides: list[str] = (), layers: str | None = None,
            seed: int | None = None) -> ExperimentConfig:
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        apply_override(raw, item)
    if layers is not None:
        raw.setdefault("model", {}).setdefault("encoder", {})["layer_kinds"] = [
            k.value for k in parse_layers(layers)]
    if seed is not None:
        raw.setdefault("train", {})["seed"] = seed
    return from_dict(raw)


def apply_override(raw: dict, item: str) -> None:
    """``a.b.c=value``; value is parsed as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "override path crosses a non-object value")
    node[parts[-1]] = value


_LAYERS_RE = re.compile(r"^\s*(\d+)\s*sa\s*\+\s*(\d+)\s*ff\s*$", re.IGNORECASE)


def parse_layers(preset: str) -> list[LayerKind]:
    """``"11sa+1ff"`` -> 11 SA layers below 1 FF layer."""
    m = _LAYERS_RE.match(preset)
    if not m:
        raise ConfigError("--layers", f"expected a preset like '11sa+1ff', got {preset!r}")
    n_sa, n_ff = int(m.group(1)), int(m.group(2))
    if n_sa + n_ff == 0:
        raise ConfigError("--layers", "encoder needs at least one layer")
    return [LayerKind.SA] * n_sa + [LayerKind.FF] * n_ff


def format_layers(kinds: list[LayerKind]) -> str:
    n_sa = sum(k == LayerKind.SA for k in kinds)
    return f"{n_sa}sa+{len(kinds) - n_sa}ff"

