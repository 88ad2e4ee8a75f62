"""Run configuration: a strict JSON schema with every seed spelled out."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import dit
from .errors import ValidationError
from .eval.metrics import fingerprint

SOURCE_DEPTH = 28
SOURCE_WINDOWS = ((0, 8), (8, 16), (12, 20), (0, 12), (8, 20))
ALPHA_GRID = (0.5, 1.0, 2.0, 2.5, 3.0)
Z_GRID = (30, 50, 80, 100)


@dataclass(frozen=True)
class DataSection:
    n_per_class: int = 500
    split_seed: int = 7
    ood_per_class: int = 100
    ood_seed: int = 11


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 8
    d: int = 64
    heads: int = 4
    patch: int = 4
    d_text: int = 32
    t_train: int = 200
    t_sample: int = 20
    ff_mult: int = 2
    beta_start: float = 1e-4
    beta_end: float = 0.02
    init_seed: int = 0

    def model_config(self) -> dit.ModelConfig:
        return dit.ModelConfig(
            n_layers=self.n_layers, d=self.d, heads=self.heads, patch=self.patch,
            d_text=self.d_text, t_train=self.t_train, t_sample=self.t_sample, ff_mult=self.ff_mult,
            beta_start=self.beta_start, beta_end=self.beta_end,
        )


@dataclass(frozen=True)
class TrainSection:
    steps: int = 12000
    batch_size: int = 8  # small batches buy more optimiser steps per CPU-second
    lr: float = 3e-4
    seed: int = 1
    epochs: int | None = None  # when set, overrides steps with whole passes over the train split
    log_every: int = 100
    ema_decay: float | None = 0.999  # None checkpoints the raw weights

    def settings(self) -> dit.TrainSettings:
        if self.epochs is not None:
            return dit.TrainSettings(self.epochs, self.batch_size, self.lr, self.seed, None, self.log_every, self.ema_decay)
        n_epochs = 1 << 30  # bounded by max_steps
        return dit.TrainSettings(n_epochs, self.batch_size, self.lr, self.seed, self.steps, self.log_every, self.ema_decay)


@dataclass(frozen=True)
class VectorsSection:
    z: int = 50
    seed_start: int = 1000
    vary_context: bool = True
    layers: tuple[int, ...] | None = None  # None = every layer


@dataclass(frozen=True)
class SteerSection:
    alpha: float = 2.5
    layer_start: int = 2
    layer_end: int = 5
    steps: tuple[int, ...] | None = None
    mode: str = "remove"


@dataclass(frozen=True)
class EvalSection:
    n_pairs: int = 100
    pair_seed_start: int = 5000
    batch_size: int = 32
    oracle_epochs: int = 12
    oracle_seed: int = 0
    oracle_floor: float = 0.95
    oracle_lr: float = 3e-3
    dye_alpha: float | None = None  # None = steer.alpha
    downstream_real_per_class: int = 60
    downstream_pairs: int = 200
    downstream_seed_start: int = 8000
    detector_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    detector_epochs: int = 12
    sigma_layer: int | None = None  # None = first steered layer


@dataclass(frozen=True)
class AblateSection:
    alpha_grid: tuple[float, ...] = ALPHA_GRID
    z_grid: tuple[int, ...] = Z_GRID
    source_depth: int = SOURCE_DEPTH
    windows: tuple[tuple[int, int], ...] = SOURCE_WINDOWS
    n_pairs: int = 100


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    vectors: VectorsSection = field(default_factory=VectorsSection)
    steer: SteerSection = field(default_factory=SteerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return fingerprint(d)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _build(cls, raw, "config")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(raw)

    def write_resolved(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.json"
        path.write_text(json.dumps({"config": self.to_dict(), "fingerprint": self.fingerprint}, indent=1, sort_keys=True))
        return path


# -- strict decoding -----------------------------------------------------------

def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{where}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ValidationError(f"{where}: expected {len(args)} items")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ValidationError(f"{where}: expected a string")
        return value
    raise ValidationError(f"{where}: unsupported field type {tp}")


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ValidationError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in raw.items()}
    return cls(**kwargs)
