"""Run configuration: one INI-style file, ``[section]`` headers and ``key = value``.

Unknown sections or keys are rejected.  Every field has a default, so an
empty file is a valid configuration.  ``to_ini`` echoes the effective values.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .adversary import AdvConfig
from .attack import AttackConfig
from .corpus import GenSpec
from .ticket import PruneConfig, RegConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    n_layers: int = 2
    n_heads: int = 4
    hidden: int = 32
    ffn_dim: int | None = None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3        # full-scale runs on a pre-trained encoder use 2e-5
    finetune_epochs: int = 10
    search_max_epochs: int = 3
    batch_size: int = 32
    miniepoch_fraction: float = 0.05
    optimizer: str = "adam_like"
    repeat: int = 5

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam_like"):
            raise ValueError("optimizer must be 'sgd' or 'adam_like'")
        if self.batch_size < 1 or self.finetune_epochs < 0 or self.repeat < 1:
            raise ValueError("batch_size and repeat must be >= 1, finetune_epochs >= 0")
        if not 0 < self.miniepoch_fraction <= 1:
            raise ValueError("miniepoch_fraction must be in (0, 1]")


@dataclass(frozen=True)
class DetectorConfig:
    gamma: float = 0.1
    window: int = 5


@dataclass(frozen=True)
class CorpusConfig:
    """Either generator settings or paths to existing corpus files."""

    n_classes: int = 2
    vocab_size: int = 200
    seq_len: int = 32
    n_train: int = 2000
    n_test: int = 500
    planted_keywords_per_class: int = 12
    synonym_group_size: int = 4
    noise_token_fraction: float = 0.75
    label_noise: float = 0.0
    bridge_groups: int = 3
    seed: int | None = None            # None: follow the run seed
    train_path: str | None = None
    test_path: str | None = None
    synonyms_path: str | None = None
    vocab_path: str | None = None

    def gen_spec(self, run_seed: int) -> GenSpec:
        kw = {f.name: getattr(self, f.name) for f in fields(GenSpec) if f.name != "seed"}
        return GenSpec(**kw, seed=run_seed if self.seed is None else self.seed)

    @property
    def from_files(self) -> bool:
        return self.train_path is not None


@dataclass(frozen=True)
class Modes:
    no_adv: bool = False
    no_regularizer: bool = False
    random_ticket: bool = False
    reinit_ticket: bool = False
    reinit_complement: bool = False
    layer_wise_heads: bool = False
    layer_wise_neurons: bool = False


@dataclass(frozen=True)
class RunSection:
    output_dir: str = "runs/default"
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: ArchConfig = field(default_factory=ArchConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    adversary: AdvConfig = field(default_factory=AdvConfig)
    regularizer: RegConfig = field(default_factory=RegConfig)
    pruning: PruneConfig = field(default_factory=PruneConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    modes: Modes = field(default_factory=Modes)
    run: RunSection = field(default_factory=RunSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def effective_prune(self) -> PruneConfig:
        p = self.pruning
        if self.modes.layer_wise_heads:
            p = replace(p, head_scope="layer_wise")
        if self.modes.layer_wise_neurons:
            p = replace(p, neuron_scope="layer_wise")
        return p

    def effective_reg(self) -> RegConfig:
        return RegConfig(0.0, 0.0) if self.modes.no_regularizer else self.regularizer

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides (values may be strings)."""
        cfg = self
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            cfg = _set(cfg, section, key, value)
        return cfg

    def to_ini(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                v = getattr(obj, f.name)
                lines.append(f"{f.name} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    def as_dict(self) -> dict[str, dict[str, Any]]:
        return {sec.name: dataclasses.asdict(getattr(self, sec.name)) for sec in fields(self)}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_type(obj, key: str):
    for f in fields(obj):
        if f.name == key:
            return f.type
    raise ConfigError(f"unknown key '{key}' in section [{_section_name(obj)}]")


def _section_name(obj) -> str:
    for sec in fields(RunConfig):
        if isinstance(obj, type(getattr(RunConfig(), sec.name))):
            return sec.name
    return type(obj).__name__


def _coerce(tp, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    tp = str(tp)
    optional = "None" in tp
    if optional and text.lower() in ("none", ""):
        return None
    if "bool" in tp:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if "int" in tp and "float" not in tp:
        return int(text)
    if "float" in tp:
        if "/" in text:
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return float(text)
    return text


def _set(cfg: RunConfig, section: str, key: str, value) -> RunConfig:
    if section not in {f.name for f in fields(RunConfig)}:
        raise ConfigError(f"unknown section [{section}]")
    obj = getattr(cfg, section)
    tp = _field_type(obj, key)
    try:
        new = replace(obj, **{key: _coerce(tp, value)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} = {value!r}: {exc}") from None
    return replace(cfg, **{section: new})


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(text)
    cfg = RunConfig()
    for section in cp.sections():
        for key, value in cp.items(section):
            cfg = _set(cfg, section, key, value)
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def sweep_values(raw: str) -> list[float]:
    """Comma-separated ratio list, e.g. ``"1/6, 1/4"``."""
    return [_coerce(float, part) for part in str(raw).split(",") if part.strip()]
