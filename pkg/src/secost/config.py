"""Run configuration: one JSON document, every default visible via ``print-config``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .core import AlphaOutOfRange, StageSchedule, TrainConfig
from .data import SynthConfig
from .model import InvalidConfig, WelsConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_dir: str = "data"
    train_manifest: str = "data/train.jsonl"
    val_manifest: str = "data/val.jsonl"
    eval_manifest: str = "data/eval.jsonl"
    classes: str = "data/classes.txt"
    feature_dir: str = "data/feat"
    run_dir: str = "runs/default"


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: WelsConfig = field(default_factory=WelsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: list[float] = field(default_factory=lambda: [0.3])
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def stage_schedule(self) -> StageSchedule:
        return StageSchedule(self.schedule)

    def validate(self) -> "RunConfig":
        try:
            self.model.validate()
            self.synth.validate()
            self.stage_schedule()
        except (InvalidConfig, AlphaOutOfRange, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.train.epochs < 1 or self.train.batch_size < 1 or self.train.lr <= 0:
            raise ConfigError("train.epochs, train.batch_size and train.lr must be positive")
        if self.train.frames < 96:
            raise ConfigError("train.frames must be at least 96")
        return self

    def check_synth_matches_model(self):
        if self.model.n_classes != self.synth.n_classes:
            raise ConfigError(f"model.n_classes={self.model.n_classes} but synth.n_classes={self.synth.n_classes}")


_SECTIONS = {"paths": PathsConfig, "model": WelsConfig, "train": TrainConfig, "synth": SynthConfig}


def _coerce(value, annotation: str, where: str):
    """Check a JSON value against a simple field annotation such as ``int | None``."""
    kinds = [a.strip() for a in str(annotation).split("|")]
    if value is None and "None" in kinds:
        return None
    if "bool" in kinds and isinstance(value, bool):
        return value
    if "int" in kinds and isinstance(value, int) and not isinstance(value, bool):
        return value
    if "float" in kinds and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if "str" in kinds and isinstance(value, str):
        return value
    raise ConfigError(f"{where}: expected {annotation}, got {value!r}")


def _build(cls, values: dict, where: str):
    types = {f.name: f.type for f in fields(cls)}
    unknown = set(values) - set(types)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return cls(**{k: _coerce(v, types[k], f"{where}.{k}") for k, v in values.items()})


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    unknown = set(d) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in d:
            if not isinstance(d[name], dict):
                raise ConfigError(f"{name} must be an object")
            kw[name] = _build(cls, d[name], name)
    if "seed" in d:
        kw["seed"] = _coerce(d["seed"], "int", "seed")
    if "schedule" in d:
        if not isinstance(d["schedule"], list):
            raise ConfigError("schedule must be a list of alphas")
        kw["schedule"] = [_coerce(a, "float", "schedule") for a in d["schedule"]]
    try:
        return RunConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(text: str) -> tuple[list[str], object]:
    """``train.epochs=4`` -> (["train", "epochs"], 4); values parse as JSON, else stay strings."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    for text in overrides:
        keys, value = parse_override(text)
        node = d
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"--set {text}: {k!r} is not a section")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"--set {text}: unknown key {'.'.join(keys)!r}")
        node[keys[-1]] = value
    return d


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    d = asdict(RunConfig())
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
    apply_overrides(d, list(overrides))
    if seed is not None:
        d["seed"] = seed
    return from_dict(d).validate()
