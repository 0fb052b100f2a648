"""Experiment configuration: one JSON document covering data, training and transfer."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .encoders import EncoderConfig
from .losses import LossConfig
from .pretrain import TrainConfig
from .synth import DatasetSpec, SourceSpec
from .transfer import TransferConfig

REQUIRED_KEYS = ("seed", "dataset", "train", "transfer")

# nested dataclass fields, per owning class; a list value means "list of"
_NESTED = {
    DatasetSpec: {"sources": [SourceSpec]},
    TrainConfig: {"loss": LossConfig, "encoder": EncoderConfig},
    TransferConfig: {"loss": LossConfig, "encoder": EncoderConfig},
}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return dataclasses.MISSING


def _check_scalar(key: str, value, default) -> None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        return
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {type(value).__name__}")


def _build(cls, data: Any, prefix: str):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for k in data:
        if k not in fields:
            raise ConfigError(f"{prefix}.{k}", "unknown key")
    nested = _NESTED.get(cls, {})
    kwargs = {}
    for k, v in data.items():
        key = f"{prefix}.{k}"
        if k in nested:
            sub = nested[k]
            if isinstance(sub, list):
                if not isinstance(v, list):
                    raise ConfigError(key, "expected a list")
                kwargs[k] = [_build(sub[0], item, f"{key}[{i}]") for i, item in enumerate(v)]
            else:
                kwargs[k] = _build(sub, v, key)
        else:
            _check_scalar(key, v, _default_of(fields[k]))
            kwargs[k] = tuple(v) if isinstance(v, list) and k in ("modalities",) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from None


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class ExperimentConfig:
    """Everything one run needs.  ``seed`` overrides the training and transfer seeds."""

    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    split: list = field(default_factory=lambda: [0.5, 0.25, 0.25])
    heldout: int = 64
    out: str | None = None

    def resolved(self, seed: int | None = None) -> "ExperimentConfig":
        """Copy with the global seed pushed into the training and transfer sections."""
        s = self.seed if seed is None else int(seed)
        return dataclasses.replace(
            self, seed=s,
            train=dataclasses.replace(self.train, seed=s),
            transfer=dataclasses.replace(self.transfer, seed=s),
        )

    def to_dict(self) -> dict:
        return _plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Any) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        for k in REQUIRED_KEYS:
            if k not in data:
                raise ConfigError(k, "required key is missing")
        fields = {f.name for f in dataclasses.fields(cls)}
        for k in data:
            if k not in fields:
                raise ConfigError(k, "unknown key")
        kwargs = {}
        for k, v in data.items():
            sub = {"dataset": DatasetSpec, "train": TrainConfig, "transfer": TransferConfig}.get(k)
            if sub is not None:
                kwargs[k] = _build(sub, v, k)
            elif k == "split":
                if not (isinstance(v, list) and len(v) == 3 and all(isinstance(x, (int, float)) for x in v)):
                    raise ConfigError(k, "expected three numbers")
                kwargs[k] = [float(x) for x in v]
            elif k == "out":
                if v is not None and not isinstance(v, str):
                    raise ConfigError(k, "expected a string or null")
                kwargs[k] = v
            else:
                _check_scalar(k, v, 0)
                kwargs[k] = v
        if kwargs.get("heldout", 64) < 2:
            raise ConfigError("heldout", "needs at least two held-out samples")
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())
