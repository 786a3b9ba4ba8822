"""Layer specifications, parameter sets and stacked forward passes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import DimensionError, Tensor

KINDS = ("conv3x3", "maxpool2", "affine", "relu", "softmax", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    width: int = 0  # output channels (conv3x3) or features (affine)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3x3", "affine") and self.width <= 0:
            raise ConfigError(f"layer {self.name}: width must be positive")


class ParamSet(Mapping[str, np.ndarray]):
    """Named parameter arrays, iterated in lexicographic order of their ids."""

    def __init__(self, items: Mapping[str, np.ndarray] | None = None):
        self._items: dict[str, np.ndarray] = dict(items or {})

    def __getitem__(self, key: str) -> np.ndarray:
        return self._items[key]

    def __setitem__(self, key: str, value: np.ndarray) -> None:
        self._items[key] = value

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._items))

    def __len__(self) -> int:
        return len(self._items)

    def size(self) -> int:
        return sum(a.size for a in self._items.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._items.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: v.astype(dtype) for k, v in self._items.items()})


def _check_names(specs: Sequence[LayerSpec]) -> None:
    seen = set()
    for s in specs:
        if s.name in seen:
            raise ConfigError(f"duplicate layer name {s.name!r}")
        seen.add(s.name)


def infer_shapes(specs: Sequence[LayerSpec], in_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Per-sample output shape after each layer (batch axis excluded)."""
    shape = tuple(in_shape)
    shapes = []
    for s in specs:
        if s.kind == "conv3x3":
            if len(shape) != 3:
                raise DimensionError(f"layer {s.name}: conv3x3 needs a C,H,W input, got {shape}")
            shape = (s.width, shape[1], shape[2])
        elif s.kind == "maxpool2":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise DimensionError(f"layer {s.name}: maxpool2 needs even H,W, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif s.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif s.kind == "affine":
            if len(shape) != 1:
                raise DimensionError(f"layer {s.name}: affine needs a flat input, got {shape}")
            shape = (s.width,)
        shapes.append(shape)
    return shapes


def param_shapes(specs: Sequence[LayerSpec], in_shape: Sequence[int]) -> dict[str, tuple[int, ...]]:
    _check_names(specs)
    shapes = {}
    prev = tuple(in_shape)
    for s, out in zip(specs, infer_shapes(specs, in_shape)):
        if s.kind == "conv3x3":
            shapes[f"{s.name}.w"] = (s.width, prev[0], 3, 3)
            shapes[f"{s.name}.b"] = (s.width,)
        elif s.kind == "affine":
            shapes[f"{s.name}.w"] = (prev[0], s.width)
            shapes[f"{s.name}.b"] = (s.width,)
        prev = out
    return shapes


def param_count(specs: Sequence[LayerSpec], in_shape: Sequence[int]) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(specs, in_shape).values())


def init_params(specs: Sequence[LayerSpec], in_shape: Sequence[int], seed, dtype=np.float64) -> ParamSet:
    """He-initialised weights (std ``sqrt(2 / fan_in)``) and zero biases.

    Draws happen in layer order from a generator seeded with ``seed``, so the
    result is a pure function of its arguments.
    """
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for pid, shape in param_shapes(specs, in_shape).items():
        if pid.endswith(".b"):
            params[pid] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[pid] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def forward_stack(specs: Sequence[LayerSpec], params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Apply ``specs`` in order to the batch ``x``.

    ``params`` maps parameter ids to tensors (usually leaves that require
    gradient). Shape errors are re-raised naming the offending layer.
    """
    for s in specs:
        try:
            if s.kind == "conv3x3":
                x = T.conv2d(x, params[f"{s.name}.w"], params[f"{s.name}.b"])
            elif s.kind == "maxpool2":
                x = T.maxpool2d(x)
            elif s.kind == "relu":
                x = T.relu(x)
            elif s.kind == "flatten":
                x = T.reshape(x, (x.shape[0], -1))
            elif s.kind == "affine":
                x = T.affine(x, params[f"{s.name}.w"], params[f"{s.name}.b"])
            elif s.kind == "softmax":
                x = T.softmax(x)
        except DimensionError as exc:
            raise DimensionError(f"layer {s.name} ({s.kind}): {exc}") from exc
    return x
