"""Run configuration: nested dataclasses loaded from JSON, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import DEFAULT_CLASS_DIRS, AugmentConfig, PreprocessConfig
from .errors import InvalidConfig
from .hog import HogConfig
from .resnet import NetConfig


@dataclass
class KnnSettings:
    k: int | None = None  # None: pick from the grid on the val split
    weighting: str = "majority"


@dataclass
class ForestSettings:
    n_trees: int = 100
    max_features: int | None = None
    min_leaf: int = 1
    max_depth: int | None = None


@dataclass
class BoostSettings:
    n_rounds: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5


@dataclass
class SvmSettings:
    kernel: str = "rbf"
    C: float = 1.0
    gamma: float | None = None
    tol: float = 1e-3
    max_passes: int = 5


@dataclass
class ResnetSettings:
    epochs: int = 500
    batch_size: int = 32
    lr: float = 0.001
    stop_at_val_accuracy: float | None = None
    net: NetConfig = field(default_factory=NetConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class RunConfig:
    data: str | None = None
    seed: int = 42
    class_dirs: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_DIRS))
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    hog: HogConfig = field(default_factory=HogConfig)
    knn: KnnSettings = field(default_factory=KnnSettings)
    rf: ForestSettings = field(default_factory=ForestSettings)
    gbm: BoostSettings = field(default_factory=BoostSettings)
    svm: SvmSettings = field(default_factory=SvmSettings)
    resnet: ResnetSettings = field(default_factory=ResnetSettings)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise InvalidConfig(f"{where}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in raw.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            value = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfig(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "config")
    if set(cfg.class_dirs) != set(DEFAULT_CLASS_DIRS):
        raise InvalidConfig("config.class_dirs must map exactly the five class names")
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(raw)


def config_to_dict(obj) -> dict:
    """JSON-ready dict; tuples become lists."""
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (tuple, list)):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(obj)
