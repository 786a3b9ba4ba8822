"""Cross-entropy objectives and the alternating two-group AdaMax optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError
from .model import (
    FusionModel,
    Scenario,
    as_batch,
    features,
    identity_input,
    predict_attributes,
    predict_identity,
)
from .tensor import Tensor

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


# ---------------------------------------------------------------- losses


def attribute_loss(probs: Tensor, labels) -> Tensor:
    """Mean over the batch of the summed per-attribute negative log-likelihood.

    ``probs`` is (N, T, 2), ``labels`` is (N, T) with entries in {0, 1}.
    """
    labels = np.asarray(labels)
    if labels.shape != probs.shape[:2]:
        raise DataError(f"attribute labels {labels.shape} do not match predictions {probs.shape[:2]}")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("attribute labels must be 0 or 1")
    n = probs.shape[0]
    return T.scale(T.tensor_sum(T.log_pick(probs, labels, LOG_FLOOR)), -1.0 / n)


def identity_loss(probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true identity; ``probs`` is (N, C)."""
    labels = np.asarray(labels)
    n, c = probs.shape
    if labels.shape != (n,):
        raise DataError(f"identity labels {labels.shape} do not match batch of {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"identity labels must lie in [0, {c})")
    return T.scale(T.tensor_sum(T.log_pick(probs, labels, LOG_FLOOR)), -1.0 / n)


# ---------------------------------------------------------------- AdaMax


@dataclass
class GroupOptState:
    """AdaMax state for one parameter group.

    ``m`` and ``u`` are owned by this state alone; two groups covering the
    same parameter keep separate copies.
    """

    group: str
    members: tuple[str, ...]
    hyper: HyperParams = field(default_factory=HyperParams)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def fresh(cls, group: str, params: Mapping[str, np.ndarray], members: Sequence[str],
              hyper: HyperParams | None = None) -> "GroupOptState":
        members = tuple(sorted(members))
        return cls(
            group,
            members,
            hyper or HyperParams(),
            {k: np.zeros_like(params[k]) for k in members},
            {k: np.zeros_like(params[k]) for k in members},
        )

    def step_size(self) -> float:
        return self.hyper.alpha / (1.0 - self.hyper.beta1 ** self.t)


def adamax_update(state: GroupOptState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    """One AdaMax step over the group's members, updating ``params`` in place."""
    missing = [k for k in state.members if k not in grads]
    if missing:
        raise KeyError(f"{state.group}: no gradient for {missing}")
    h = state.hyper
    state.t += 1
    lr = state.step_size()
    for k in state.members:
        g = grads[k]
        m = state.m[k]
        u = state.u[k]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        np.maximum(h.beta2 * u, np.abs(g), out=u)
        # Guard only bites where u < eps, i.e. an all-zero gradient history.
        params[k] -= (lr * (m / np.maximum(u, h.eps))).astype(params[k].dtype)


def group_members(model: FusionModel, group: str) -> list[str]:
    """Parameter keys of ``theta1`` (w1, w21) or ``theta2`` (w1, w21, w22).

    Without fusion the identity loss cannot reach w21, so ``theta2`` drops it.
    """
    if group == "theta1":
        wanted = ("w1", "w21")
    elif group == "theta2":
        wanted = ("w1", "w21", "w22") if model.scenario.fused else ("w1", "w22")
    else:
        raise ValueError(f"unknown group {group!r}")
    return [k for k in model.arrays() if k.split("/", 1)[0] in wanted]


def make_states(model: FusionModel, hyper: HyperParams | None = None) -> tuple[GroupOptState, GroupOptState]:
    params = model.arrays()
    return (
        GroupOptState.fresh("theta1", params, group_members(model, "theta1"), hyper),
        GroupOptState.fresh("theta2", params, group_members(model, "theta2"), hyper),
    )


# ---------------------------------------------------------------- training steps


@dataclass
class Batch:
    images: np.ndarray
    identities: np.ndarray
    attributes: np.ndarray


@dataclass
class StepResult:
    l1: float | None
    l2: float | None
    attr_probs: np.ndarray | None = None
    id_probs: np.ndarray | None = None

    def __iter__(self):
        return iter((self.l1, self.l2))


def _gradients(model: FusionModel, loss_fn, members: Sequence[str]):
    leaves = model.leaves(requires_grad=True)
    loss, aux = loss_fn(leaves)
    grads = T.backward(loss, [leaves[k] for k in members])
    return loss.item(), dict(zip(members, grads)), aux


def attribute_step(model: FusionModel, state: GroupOptState, batch: Batch) -> tuple[float, np.ndarray]:
    """Forward f, L1, backprop over theta1, one AdaMax update. Returns pre-update L1."""

    def loss_fn(leaves):
        probs = predict_attributes(model, features(model, batch.images, leaves), leaves)
        return attribute_loss(probs, batch.attributes), probs.data

    l1, grads, probs = _gradients(model, loss_fn, state.members)
    adamax_update(state, model.arrays(), grads)
    return l1, probs


def identity_step(model: FusionModel, state: GroupOptState, batch: Batch) -> tuple[float, np.ndarray]:
    """Forward g (fused per scenario), L2, backprop over theta2, one AdaMax update."""

    def loss_fn(leaves):
        x = as_batch(model, batch.images)
        feats = features(model, x, leaves)
        attr_probs = predict_attributes(model, feats, leaves) if model.scenario is Scenario.PA else None
        probs = predict_identity(model, identity_input(model, feats, attr_probs, batch.attributes), leaves)
        return identity_loss(probs, batch.identities), probs.data

    l2, grads, probs = _gradients(model, loss_fn, state.members)
    adamax_update(state, model.arrays(), grads)
    return l2, probs


def joint_step(model: FusionModel, opt1: GroupOptState, opt2: GroupOptState, batch: Batch) -> StepResult:
    """One iteration of the alternating optimizer.

    theta1 is updated first; the identity gradient is then taken at the
    updated weights. Under NPD the attribute half is skipped.
    """
    l1 = attr_probs = None
    if model.scenario is not Scenario.NPD:
        l1, attr_probs = attribute_step(model, opt1, batch)
    l2, id_probs = identity_step(model, opt2, batch)
    return StepResult(l1, l2, attr_probs, id_probs)
