"""Run configuration: ``section.key=value`` text files with flag overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError


def _parse_shape(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(","))


def _parse_stages(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_parse_shape(stage) for stage in text.replace(" ", "").split(";"))


def _fmt_stages(stages) -> str:
    return ";".join(",".join(str(w) for w in st) for st in stages)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    name: str = ""


@dataclass
class ModelSection:
    scenario: str = "pa"
    input_shape: tuple[int, ...] = (3, 64, 64)
    stages: tuple[tuple[int, ...], ...] = ((16,), (32,), (64, 64), (128, 128), (128, 128))
    fc_width: int = 256


@dataclass
class OptSection:
    alpha: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainSection:
    batch_size: int = 16
    epochs: int = 50
    dtype: str = "float32"
    separate: bool = False


@dataclass
class DataSection:
    manifest: str = ""
    train_fraction: float = 0.8
    split_seed: int = 0
    filter_attributes: bool = True


_PARSERS = {
    "input_shape": (_parse_shape, lambda v: ",".join(str(x) for x in v)),
    "stages": (_parse_stages, _fmt_stages),
}

# Keys left out of provenance blocks: where a run writes, not what it computes.
_NON_PROVENANCE = {"run.out"}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    opt: OptSection = field(default_factory=OptSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    # -------------------------------------------------------------- access
    def keys(self) -> list[str]:
        return [
            f"{sec.name}.{f.name}"
            for sec in dataclasses.fields(self)
            for f in dataclasses.fields(getattr(self, sec.name))
        ]

    def get(self, key: str) -> Any:
        section, name = self._split(key)
        return getattr(getattr(self, section), name)

    def set(self, key: str, raw: Any) -> None:
        section, name = self._split(key)
        sec = getattr(self, section)
        current = getattr(sec, name)
        if not isinstance(raw, str):
            setattr(sec, name, raw)
            return
        try:
            if name in _PARSERS:
                value = _PARSERS[name][0](raw)
            elif isinstance(current, bool):
                value = _parse_bool(raw)
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        setattr(sec, name, value)

    def _split(self, key: str) -> tuple[str, str]:
        if key not in self.keys():
            raise ConfigError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        return section, name

    def format_value(self, key: str) -> str:
        value = self.get(key)
        name = key.split(".", 1)[1]
        if name in _PARSERS:
            return _PARSERS[name][1](value)
        if isinstance(value, bool):
            return "true" if value else "false"
        return repr(value) if isinstance(value, float) else str(value)

    # -------------------------------------------------------------- text io
    def to_text(self, provenance: bool = True) -> str:
        keys = [k for k in self.keys() if not (provenance and k in _NON_PROVENANCE)]
        return "".join(f"{k}={self.format_value(k)}\n" for k in keys)

    @classmethod
    def from_text(cls, text: str, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        cfg = cls()
        for key, value in parse_pairs(text.splitlines()).items():
            cfg.set(key, value)
        for key, value in (overrides or {}).items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), overrides)

    def validate(self) -> None:
        if self.model.scenario not in ("npd", "gt", "pa"):
            raise ConfigError(f"model.scenario must be npd, gt or pa, got {self.model.scenario!r}")
        if len(self.model.input_shape) != 3 or min(self.model.input_shape) <= 0:
            raise ConfigError(f"model.input_shape must be C,H,W, got {self.model.input_shape}")
        if not self.model.stages or any(not st or min(st) <= 0 for st in self.model.stages):
            raise ConfigError("model.stages needs at least one non-empty stage of positive widths")
        if self.model.fc_width <= 0:
            raise ConfigError("model.fc_width must be positive")
        if not self.opt.alpha > 0:
            raise ConfigError("opt.alpha must be positive")
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(self.opt, key) < 1.0:
                raise ConfigError(f"opt.{key} must lie in [0, 1)")
        if self.train.batch_size <= 0 or self.train.epochs <= 0:
            raise ConfigError("train.batch_size and train.epochs must be positive")
        if self.train.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        if not 0.0 < self.data.train_fraction < 1.0:
            raise ConfigError("data.train_fraction must lie in (0, 1)")


def parse_pairs(lines: Iterable[str]) -> dict[str, str]:
    """Parse ``key=value`` lines, skipping blanks and ``#`` comments."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
