"""Experiment configuration: one TOML file, strict keys.

Format version 1::

    version = 1
    seed = 0

    [dataset]            # SynthConfig fields, or `path` to an existing dataset directory
    [backbone]           # BackboneConfig fields
    [base_training]      # BaseTrainConfig fields
    [meta_training]      # MetaTrainConfig fields plus `variant`
    [evaluation]         # num_tasks, shots, modes, flags

Unknown sections or keys raise :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backbone import BackboneConfig
from .classifiers import BaseTrainConfig
from .data import SynthConfig
from .episodes import MetaTrainConfig
from .errors import ConfigError
from .model import MODES, VARIANTS

CONFIG_VERSION = 1


@dataclass(frozen=True)
class EvalConfig:
    num_tasks: int = 100
    shots: int = 1
    modes: tuple[str, ...] = ("plain", "npf", "nsf", "pcn")
    include_background: bool = False
    global_accumulate: bool = False
    inner_iters: int = 50
    inner_lr: float = 0.1
    heatmaps: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))

    def validate(self) -> None:
        if self.num_tasks < 1 or self.shots < 1:
            raise ConfigError("evaluation.num_tasks and evaluation.shots must be positive")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"evaluation.modes: unknown mode {m!r}; choose from {MODES}")
        if self.heatmaps < 0:
            raise ConfigError("evaluation.heatmaps must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: SynthConfig = field(default_factory=SynthConfig)
    dataset_path: str | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    base_training: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    meta_training: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    variant: str = "pcn"
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.dataset.validate()
        self.backbone.validate()
        if self.backbone.input_size != self.dataset.image_size:
            raise ConfigError("backbone.input_size must equal dataset.image_size")
        self.base_training.validate()
        self.meta_training.validate()
        if self.variant not in VARIANTS:
            raise ConfigError(f"meta_training.variant must be one of {VARIANTS}")
        self.evaluation.validate()

    def to_dict(self) -> dict:
        d = {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "dataset": dataclasses.asdict(self.dataset),
            "backbone": dataclasses.asdict(self.backbone),
            "base_training": dataclasses.asdict(self.base_training),
            "meta_training": {**dataclasses.asdict(self.meta_training), "variant": self.variant},
            "evaluation": dataclasses.asdict(self.evaluation),
        }
        if self.dataset_path is not None:
            d["dataset"]["path"] = self.dataset_path
        return _jsonable(d)

    def hash(self) -> str:
        """Identifies the experiment, not where its files live: the dataset path is left out."""
        d = self.to_dict()
        d["dataset"].pop("path", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **kw) -> ExperimentConfig:
        return dataclasses.replace(self, **kw)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _build(cls, section: str, values: dict, extra: tuple[str, ...] = ()):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names - set(extra)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")
    kwargs = {k: v for k, v in values.items() if k in names}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"[{section}] {e}") from None


_SECTIONS = ("dataset", "backbone", "base_training", "meta_training", "evaluation")


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    seed = raw.pop("seed", 0)
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    for name in _SECTIONS:
        if not isinstance(raw.get(name, {}), dict):
            raise ConfigError(f"[{name}] must be a table")
    ds = dict(raw.get("dataset", {}))
    path = ds.pop("path", None)
    meta = dict(raw.get("meta_training", {}))
    variant = meta.pop("variant", "pcn")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    cfg = ExperimentConfig(
        seed=seed,
        dataset=_build(SynthConfig, "dataset", ds),
        dataset_path=path,
        backbone=_build(BackboneConfig, "backbone", raw.get("backbone", {})),
        base_training=_build(BaseTrainConfig, "base_training", raw.get("base_training", {})),
        meta_training=_build(MetaTrainConfig, "meta_training", meta),
        variant=variant,
        evaluation=_build(EvalConfig, "evaluation", raw.get("evaluation", {})),
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{p}: config file not found") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    return from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(type(v))


def dump_config(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    lines = [f"version = {d.pop('version')}", f"seed = {d.pop('seed')}", ""]
    for section, values in d.items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if v is not None:
                lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)
