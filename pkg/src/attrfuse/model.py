"""Shared feature network with an attribute branch and a fused identity branch.

Parameter groups follow the naming used throughout the package:

* ``w1``  - convolutional feature network (shared by both tasks)
* ``w21`` - attribute branch, T two-way softmax outputs
* ``w22`` - identity branch, reads pooled features (plus attributes when fused)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ScenarioError
from .layers import LayerSpec, ParamSet, forward_stack, infer_shapes, init_params
from .tensor import DimensionError, Tensor


class Scenario(str, enum.Enum):
    NPD = "npd"  # no privileged data
    GT = "gt"  # ground-truth attributes fused
    PA = "pa"  # predicted attributes fused

    @property
    def fused(self) -> bool:
        return self is not Scenario.NPD


@dataclass(frozen=True)
class ArchConfig:
    input_shape: tuple[int, int, int] = (3, 64, 64)
    stages: tuple[tuple[int, ...], ...] = ((16,), (32,), (64, 64), (128, 128), (128, 128))
    fc_width: int = 256

    def feature_specs(self) -> list[LayerSpec]:
        specs = []
        for s, widths in enumerate(self.stages, 1):
            for i, width in enumerate(widths, 1):
                specs.append(LayerSpec("conv3x3", f"conv{s}_{i}", width))
                specs.append(LayerSpec("relu", f"relu{s}_{i}"))
            specs.append(LayerSpec("maxpool2", f"pool{s}"))
        specs.append(LayerSpec("flatten", "flatten"))
        return specs

    @property
    def pool_width(self) -> int:
        return infer_shapes(self.feature_specs(), self.input_shape)[-1][0]

    def attribute_specs(self, n_attributes: int) -> list[LayerSpec]:
        return [
            LayerSpec("affine", "attr_fc1", self.fc_width),
            LayerSpec("relu", "attr_relu1"),
            LayerSpec("affine", "attr_fc2", 2 * n_attributes),
        ]

    def identity_specs(self, n_identities: int) -> list[LayerSpec]:
        return [
            LayerSpec("affine", "id_fc1", self.fc_width),
            LayerSpec("relu", "id_relu1"),
            LayerSpec("affine", "id_fc2", n_identities),
        ]

    @classmethod
    def from_config(cls, cfg) -> "ArchConfig":
        return cls(tuple(cfg.model.input_shape), tuple(cfg.model.stages), cfg.model.fc_width)


@dataclass
class FusionModel:
    arch: ArchConfig
    scenario: Scenario
    n_attributes: int
    n_identities: int
    w1: ParamSet = field(repr=False)
    w21: ParamSet = field(repr=False)
    w22: ParamSet = field(repr=False)

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        if self.n_attributes < 1 or self.n_identities < 2:
            raise DimensionError("need at least one attribute and two identities")
        names = [set(self.w1), set(self.w21), set(self.w22)]
        if names[0] & names[1] or names[0] & names[2] or names[1] & names[2]:
            raise ValueError("parameter namespaces w1, w21, w22 overlap")
        expected = self.identity_input_width
        actual = self.w22["id_fc1.w"].shape[0]
        if actual != expected:
            raise DimensionError(f"identity branch reads {actual} features, expected {expected}")

    @classmethod
    def create(cls, arch: ArchConfig, scenario, n_attributes: int, n_identities: int, seed: int = 0,
               dtype=np.float64) -> "FusionModel":
        s1, s21, s22 = np.random.SeedSequence(seed).spawn(3)
        scenario = Scenario(scenario)
        d_pool = arch.pool_width
        id_in = d_pool + (n_attributes if scenario.fused else 0)
        return cls(
            arch,
            scenario,
            n_attributes,
            n_identities,
            init_params(arch.feature_specs(), arch.input_shape, s1, dtype),
            init_params(arch.attribute_specs(n_attributes), (d_pool,), s21, dtype),
            init_params(arch.identity_specs(n_identities), (id_in,), s22, dtype),
        )

    @property
    def identity_input_width(self) -> int:
        return self.arch.pool_width + (self.n_attributes if self.scenario.fused else 0)

    @property
    def dtype(self):
        return self.w1["conv1_1.w"].dtype

    def groups(self) -> dict[str, ParamSet]:
        return {"w1": self.w1, "w21": self.w21, "w22": self.w22}

    def arrays(self) -> dict[str, np.ndarray]:
        """All parameter arrays keyed ``<group>/<id>``; the arrays are the live ones."""
        return {f"{g}/{pid}": ps[pid] for g, ps in self.groups().items() for pid in ps}

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays().items()}


def _group_view(leaves: Mapping[str, Tensor], group: str) -> dict[str, Tensor]:
    prefix = group + "/"
    return {k[len(prefix):]: v for k, v in leaves.items() if k.startswith(prefix)}


def _params(model: FusionModel, leaves: Mapping[str, Tensor] | None) -> Mapping[str, Tensor]:
    return leaves if leaves is not None else model.leaves(requires_grad=False)


def as_batch(model: FusionModel, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return T.constant(np.asarray(x, dtype=model.dtype))


def features(model: FusionModel, x, leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    """Flattened output of the last pooling layer, shape (N, D_pool)."""
    x = as_batch(model, x)
    if x.ndim != 4 or x.shape[1:] != tuple(model.arch.input_shape):
        raise DimensionError(f"input batch {x.shape} does not match N x {model.arch.input_shape}")
    p = _group_view(_params(model, leaves), "w1")
    return forward_stack(model.arch.feature_specs(), p, x)


def predict_attributes(model: FusionModel, feats: Tensor, leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    """T independent two-way softmax distributions, shape (N, T, 2)."""
    p = _group_view(_params(model, leaves), "w21")
    logits = forward_stack(model.arch.attribute_specs(model.n_attributes), p, feats)
    return T.softmax(T.reshape(logits, (feats.shape[0], model.n_attributes, 2)))


def positive_probability(attr_probs: Tensor) -> Tensor:
    """Probability of the positive category per attribute, shape (N, T)."""
    return T.select_last(attr_probs, 1)


def fuse(feats: Tensor, attrs, scenario) -> Tensor:
    """Concatenate attribute values onto pooled features.

    Under GT the attributes are data and are injected as a constant. Under PA
    ``attrs`` should be the tensor produced by :func:`positive_probability`,
    so the identity loss also reaches the attribute branch.
    """
    scenario = Scenario(scenario)
    if not scenario.fused:
        raise ScenarioError("fusion is not defined for the npd scenario")
    if scenario is Scenario.GT:
        attrs = T.constant(np.asarray(attrs.data if isinstance(attrs, Tensor) else attrs, dtype=feats.dtype))
    elif not isinstance(attrs, Tensor):
        attrs = T.constant(np.asarray(attrs, dtype=feats.dtype))
    if attrs.ndim != 2 or attrs.shape[0] != feats.shape[0]:
        raise DimensionError(f"attributes {attrs.shape} do not align with features {feats.shape}")
    return T.concat([feats, attrs], axis=1)


def predict_identity(model: FusionModel, fused: Tensor, leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    """C-way softmax over identities, shape (N, C)."""
    if fused.ndim != 2 or fused.shape[1] != model.identity_input_width:
        raise DimensionError(
            f"identity branch expects width {model.identity_input_width}, got {fused.shape}"
        )
    p = _group_view(_params(model, leaves), "w22")
    logits = forward_stack(model.arch.identity_specs(model.n_identities), p, fused)
    return T.softmax(logits)


def identity_input(model: FusionModel, feats: Tensor, attr_probs: Tensor | None, gt_attrs=None) -> Tensor:
    """What the identity branch reads under the model's scenario."""
    if model.scenario is Scenario.NPD:
        return feats
    if model.scenario is Scenario.GT:
        if gt_attrs is None:
            raise ScenarioError("gt scenario needs ground-truth attributes")
        return fuse(feats, gt_attrs, Scenario.GT)
    return fuse(feats, positive_probability(attr_probs), Scenario.PA)


def forward(model: FusionModel, x, gt_attrs=None, leaves: Mapping[str, Tensor] | None = None):
    """Full forward pass returning ``(attribute_probs, identity_probs)``."""
    feats = features(model, x, leaves)
    attr_probs = predict_attributes(model, feats, leaves)
    id_probs = predict_identity(model, identity_input(model, feats, attr_probs, gt_attrs), leaves)
    return attr_probs, id_probs
