"""Experiment configuration: nested dataclasses loaded from YAML or JSON with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .decode import DecodeConfig
from .lm import LmArch, LmTrainConfig
from .model import ModelArch
from .optim import ADAM, OptimizerSpec
from .train import TrainConfig, default_optimizer


class ConfigError(ValueError):
    pass


@dataclass
class LanguageConfig:
    name: str
    inventory: str
    n_utts: int = 500
    lexicon_size: int = 40
    word_len: tuple[int, int] = (2, 5)
    words_per_utt: tuple[int, int] = (1, 3)
    frames_per_grapheme: tuple[int, int] = (2, 5)
    noise: float = 0.5


@dataclass
class CorpusConfig:
    dim: int = 20
    emission_seed: int = 0
    confusable: list[tuple[str, str]] = field(default_factory=list)
    confusable_distance: float = 1.0
    languages: list[LanguageConfig] = field(default_factory=list)
    target: str | None = None

    def language(self, name: str) -> LanguageConfig:
        for lang in self.languages:
            if lang.name == name:
                return lang
        raise ConfigError(f"no language named {name!r}")

    @property
    def train_languages(self) -> list[LanguageConfig]:
        return [lang for lang in self.languages if lang.name != self.target]


@dataclass
class EpochPlan:
    stage0: int = 15
    mono: int = 15
    stage1: int = 15
    stage2: int = 15


@dataclass
class OptimizerPlan:
    stage0: OptimizerSpec = field(default_factory=lambda: default_optimizer("stage0"))
    mono: OptimizerSpec = field(default_factory=lambda: default_optimizer("stage0"))
    stage1: OptimizerSpec = field(default_factory=lambda: default_optimizer("stage1"))
    stage2: OptimizerSpec = field(default_factory=lambda: default_optimizer("stage2"))


@dataclass
class LmConfig:
    arch: LmArch = field(default_factory=LmArch)
    train: LmTrainConfig = field(default_factory=lambda: LmTrainConfig(optimizer=OptimizerSpec(ADAM, 1e-2)))


@dataclass
class ExperimentConfig:
    seed: int = 0
    arch: ModelArch = field(default_factory=ModelArch)
    train: TrainConfig = field(default_factory=TrainConfig)
    epochs: EpochPlan = field(default_factory=EpochPlan)
    optimizers: OptimizerPlan = field(default_factory=OptimizerPlan)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    lm_betas: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5])
    subset_sizes: list[int] = field(default_factory=lambda: [50, 100, 200, 400])
    prior_epoch: int | None = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    data_dir: str | None = None


# ---------------------------------------------------------------- generic (de)serialization


def _build(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{where}: null is not allowed")
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp) if f.init}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in value.items()}
        try:
            return tp(**kwargs)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"{where}: {err}") from err
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a list of {len(args)} items")
        return tuple(_build(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-8" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported type {tp}")


def from_dict(data: dict, cls=ExperimentConfig):
    return _build(cls, data, cls.__name__)


def to_dict(obj) -> dict:
    def plain(x):
        if dataclasses.is_dataclass(x):
            return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x

    return plain(obj)


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text) if Path(path).suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as err:
        raise ConfigError(f"{path}: {err}") from err
    return from_dict(data or {})


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    """Write the fully resolved config as YAML (JSON when the suffix is .json)."""
    data = to_dict(cfg)
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        path.write_text(yaml.safe_dump(data, sort_keys=True), encoding="utf-8")


def override(cfg, dotted: str, value):
    """Replace one nested field, e.g. ``override(cfg, "decode.beam", 5)``; returns a new config."""
    head, _, rest = dotted.partition(".")
    if not dataclasses.is_dataclass(cfg) or head not in {f.name for f in dataclasses.fields(cfg)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    if rest:
        value = override(getattr(cfg, head), rest, value)
    data = to_dict(cfg)
    data[head] = to_dict(value) if dataclasses.is_dataclass(value) else value
    return _build(type(cfg), data, type(cfg).__name__)
