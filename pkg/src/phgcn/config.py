"""JSON run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ValidationError
from .evalx import ExperimentConfig
from .fusion import FusionConfig, ModelConfig, read_adjacency_file
from .optim import TrainConfig
from .preprocess import PreprocessConfig


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.preprocess.validate()
        self.experiment.validate()
        enc, pre = self.model.encoder, self.preprocess
        if tuple(enc.sax_shape) != tuple(pre.sax_shape) or tuple(enc.ch4_shape) != tuple(pre.ch4_shape):
            raise ValidationError(
                f"encoder input shapes {enc.sax_shape}/{enc.ch4_shape} differ from preprocess shapes "
                f"{pre.sax_shape}/{pre.ch4_shape}")
        if enc.frames != pre.frames_out:
            raise ValidationError(f"encoder.frames={enc.frames} but preprocess.frames_out={pre.frames_out}")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ValidationError(f"{where}: expected an object")
        return from_dict(tp, value, where)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ValidationError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
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
    return value


def from_dict(cls, data: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(names))}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a RunConfig JSON file (missing keys take defaults)."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: top level must be an object")
        fusion = data.get("model", {}).get("fusion", {})
        # a string custom_adjacency is a path to a 0/1 text matrix, relative to the config
        if isinstance(fusion.get("custom_adjacency"), str):
            adj_path = Path(path).parent / fusion["custom_adjacency"]
            fusion["custom_adjacency"] = [list(r) for r in read_adjacency_file(adj_path)]
    cfg = from_dict(RunConfig, {**data, **(overrides or {})})
    cfg.validate()
    return cfg


def desk_config() -> RunConfig:
    """Same field of view as the defaults at 4x coarser spacing (5.6 mm)."""
    pre = PreprocessConfig(target_spacing=5.6, sax_shape=(36, 36, 3), ch4_shape=(40, 40))
    enc = EncoderConfig(sax_shape=pre.sax_shape, ch4_shape=pre.ch4_shape)
    return RunConfig(model=ModelConfig(encoder=enc, fusion=FusionConfig()), preprocess=pre)


__all__ = ["RunConfig", "load_config", "from_dict", "desk_config", "EncoderConfig", "FusionConfig",
           "ModelConfig", "TrainConfig", "PreprocessConfig", "ExperimentConfig"]
