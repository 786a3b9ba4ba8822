"""Finite-difference checks for every differentiable op and both losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import ArchConfig, FusionModel, Scenario, forward, features, predict_attributes
from .optim import attribute_loss, identity_loss
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def away_from_zero(x: np.ndarray, gap: float = 0.05) -> np.ndarray:
    """Push entries away from the ReLU kink."""
    return np.where(x >= 0, x + gap, x - gap)


def distinct_windows(rng: np.random.Generator, shape) -> np.ndarray:
    """Values spaced far enough apart that no pooling window has a near-tie."""
    return rng.permutation(np.arange(int(np.prod(shape)), dtype=np.float64)).reshape(shape) * 0.1


def _weights(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def op_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    """One zero-argument check per op kind; each returns its max relative error."""
    rng = np.random.default_rng(seed)
    x2 = rng.standard_normal((3, 4))
    w2 = _weights(rng, (4, 2))
    b2 = rng.standard_normal(2)
    x4 = rng.standard_normal((1, 2, 6, 6))
    k4 = _weights(rng, (3, 2, 3, 3))
    cb = rng.standard_normal(3)
    pool_in = distinct_windows(rng, (1, 1, 8, 8))
    relu_in = away_from_zero(rng.standard_normal((4, 5)))
    soft_in = rng.standard_normal((3, 4))
    soft_w = rng.standard_normal((3, 4))
    cat_a = rng.standard_normal((2, 3))
    cat_b = rng.standard_normal((2, 2))
    cat_w = rng.standard_normal((2, 5))
    probs_labels = rng.integers(0, 2, size=(3, 4))
    id_labels = rng.integers(0, 5, size=4)

    def weighted(out: Tensor, w: np.ndarray) -> Tensor:
        return T.tensor_sum(T.multiply(out, T.constant(w)))

    out_w = rng.standard_normal((3, 2))
    conv_w = rng.standard_normal((1, 3, 6, 6))
    pool_w = rng.standard_normal((1, 1, 4, 4))
    relu_w = rng.standard_normal((4, 5))

    return {
        "affine/x": lambda: grad_check(lambda x: weighted(T.affine(x, T.constant(w2), T.constant(b2)), out_w), x2),
        "affine/w": lambda: grad_check(lambda w: weighted(T.affine(T.constant(x2), w, T.constant(b2)), out_w), w2),
        "affine/b": lambda: grad_check(lambda b: weighted(T.affine(T.constant(x2), T.constant(w2), b), out_w), b2),
        "conv2d/x": lambda: grad_check(lambda x: weighted(T.conv2d(x, T.constant(k4), T.constant(cb)), conv_w), x4),
        "conv2d/k": lambda: grad_check(lambda k: weighted(T.conv2d(T.constant(x4), k, T.constant(cb)), conv_w), k4),
        "conv2d/b": lambda: grad_check(lambda b: weighted(T.conv2d(T.constant(x4), T.constant(k4), b), conv_w), cb),
        "maxpool2d": lambda: grad_check(lambda x: weighted(T.maxpool2d(x), pool_w), pool_in),
        "relu": lambda: grad_check(lambda x: weighted(T.relu(x), relu_w), relu_in),
        "softmax": lambda: grad_check(lambda x: weighted(T.softmax(x), soft_w), soft_in),
        "concat": lambda: grad_check(lambda a: weighted(T.concat([a, T.constant(cat_b)], axis=1), cat_w), cat_a),
        "softmax_cross_entropy/attributes": lambda: grad_check(
            lambda z: attribute_loss(T.softmax(T.reshape(z, (3, 4, 2))), probs_labels), rng.standard_normal(24)
        ),
        "softmax_cross_entropy/identity": lambda: grad_check(
            lambda z: identity_loss(T.softmax(z), id_labels), rng.standard_normal((4, 5))
        ),
    }


def tiny_model(scenario, seed: int = 0) -> FusionModel:
    arch = ArchConfig(input_shape=(2, 4, 4), stages=((3,), (4,)), fc_width=5)
    return FusionModel.create(arch, scenario, n_attributes=3, n_identities=4, seed=seed, dtype=np.float64)


def model_loss_check(model: FusionModel, which: str, seed: int = 0) -> float:
    """Max relative error over every parameter array of the chosen loss."""
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(-1, 1, size=(4,) + model.arch.input_shape)
    ids = rng.integers(0, model.n_identities, size=4)
    attrs = rng.integers(0, 2, size=(4, model.n_attributes))

    def loss_with(key: str, value: Tensor) -> Tensor:
        leaves = model.leaves(requires_grad=False)
        leaves[key] = value
        if which == "l1":
            return attribute_loss(predict_attributes(model, features(model, x, leaves), leaves), attrs)
        _, id_probs = forward(model, x, gt_attrs=attrs, leaves=leaves)
        return identity_loss(id_probs, ids)

    worst = 0.0
    for key, arr in model.arrays().items():
        if which == "l1" and key.startswith("w22/"):
            continue
        worst = max(worst, grad_check(lambda v, key=key: loss_with(key, v), arr))
    return worst


def run_suite(seed: int = 0) -> list[CheckResult]:
    results = [CheckResult(name, fn()) for name, fn in op_checks(seed).items()]
    for scenario in (Scenario.PA, Scenario.GT, Scenario.NPD):
        model = tiny_model(scenario, seed)
        if scenario is Scenario.PA:
            results.append(CheckResult("model/l1", model_loss_check(model, "l1", seed)))
        results.append(CheckResult(f"model/l2[{scenario.value}]", model_loss_check(model, "l2", seed)))
    return results
