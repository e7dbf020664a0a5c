"""Learned adaptation objectives and the inner gradient step.

Demonstrations carry no action labels, so the adaptation signal is a learned
function of the policy's own activations over the demo: two temporal-conv
stacks (one over the feature-point sequence, one over the last hidden layer)
whose output norms sum to the loss, or a per-timestep linear map squared and
averaged as a cheaper variant.  The inner step descends this objective with
elementwise gradient clipping; clipping passes gradient 1 inside the range
and 0 outside, so clipped components act as constants to the outer update.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from . import tensor as T
from .params import ParameterVector
from .policy import PolicyActivations, PolicyConfig, policy_forward_seq
from .tensor import Tensor


class DemonstrationTooShort(ValueError):
    pass


@dataclass(frozen=True)
class LossNetConfig:
    channels: tuple = (10, 10)  # widths of the first two temporal conv layers
    kernel: int = 10            # their filter length; the third layer is 1x1

    @property
    def min_length(self) -> int:
        return 2 * (self.kernel - 1) + 1


class TemporalAdaptLoss:
    """Two 3-layer temporal conv stacks; loss = ||stack(f)|| + ||stack(h)||.

    ReLU joins the first two layers only; the third is linear.  Valid padding
    means the input sequence must have at least ``min_length`` frames.
    """

    kind = "temporal"

    def __init__(self, params: ParameterVector, cfg: LossNetConfig):
        self.params = params
        self.cfg = cfg

    def with_params(self, params: ParameterVector) -> "TemporalAdaptLoss":
        return TemporalAdaptLoss(params, self.cfg)

    def _stack(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        y = T.relu(T.conv1d_valid(x, p[f"{prefix}/conv0_w"], p[f"{prefix}/conv0_b"]))
        y = T.relu(T.conv1d_valid(y, p[f"{prefix}/conv1_w"], p[f"{prefix}/conv1_b"]))
        y = T.conv1d_valid(y, p[f"{prefix}/conv2_w"], p[f"{prefix}/conv2_b"])
        return T.l2_norm(y)

    def loss(self, acts: PolicyActivations) -> Tensor:
        if acts.f.shape[0] < self.cfg.min_length:
            raise DemonstrationTooShort(
                f"adaptation loss needs at least {self.cfg.min_length} frames, "
                f"got {acts.f.shape[0]}")
        return T.add(self._stack("f_stack", acts.f), self._stack("h_stack", acts.h))


def init_temporal_loss(pcfg: PolicyConfig, lcfg: LossNetConfig,
                       rng: np.random.Generator) -> TemporalAdaptLoss:
    entries = []
    k = lcfg.kernel
    c1, c2 = lcfg.channels
    for prefix, din in (("f_stack", pcfg.feature_dim), ("h_stack", pcfg.fc_width)):
        entries.append((f"{prefix}/conv0_w",
                        T.parameter(nn.fan_in_uniform(rng, (k, din, c1), k * din))))
        entries.append((f"{prefix}/conv0_b", T.parameter(np.zeros(c1))))
        entries.append((f"{prefix}/conv1_w",
                        T.parameter(nn.fan_in_uniform(rng, (k, c1, c2), k * c1))))
        entries.append((f"{prefix}/conv1_b", T.parameter(np.zeros(c2))))
        entries.append((f"{prefix}/conv2_w",
                        T.parameter(nn.fan_in_uniform(rng, (1, c2, 1), c2))))
        entries.append((f"{prefix}/conv2_b", T.parameter(np.zeros(1))))
    return TemporalAdaptLoss(ParameterVector(entries), lcfg)


class LinearAdaptLoss:
    """Squared per-timestep linear readout of (f_t, h_t), averaged over time."""

    kind = "linear"

    def __init__(self, params: ParameterVector):
        self.params = params

    def with_params(self, params: ParameterVector) -> "LinearAdaptLoss":
        return LinearAdaptLoss(params)

    def loss(self, acts: PolicyActivations) -> Tensor:
        x = T.concat([acts.f, acts.h], axis=1)
        z = T.add(T.matmul(x, self.params["w"]), self.params["b"])  # [T, 1]
        return T.mean(T.mul(z, z))


def init_linear_loss(pcfg: PolicyConfig, rng: np.random.Generator) -> LinearAdaptLoss:
    din = pcfg.feature_dim + pcfg.fc_width
    return LinearAdaptLoss(ParameterVector({
        "w": T.parameter(nn.fan_in_uniform(rng, (din, 1), din)),
        "b": T.parameter(np.zeros(1)),
    }))


def make_adapt_loss(method: str, pcfg: PolicyConfig, lcfg: LossNetConfig,
                    rng: np.random.Generator):
    if method == "daml_temporal":
        return init_temporal_loss(pcfg, lcfg, rng)
    if method == "daml_linear":
        return init_linear_loss(pcfg, rng)
    raise ValueError(f"no adaptation loss for method {method!r}")


def load_adapt_loss(method: str, params: ParameterVector, lcfg: LossNetConfig):
    """Rebuild a loss object around previously trained parameters."""
    if method == "daml_temporal":
        return TemporalAdaptLoss(params, lcfg)
    if method == "daml_linear":
        return LinearAdaptLoss(params)
    raise ValueError(f"no adaptation loss for method {method!r}")


class AdaptResult(NamedTuple):
    phi: ParameterVector
    loss_pre: float
    loss_post: float | None


def inner_adapt(theta: ParameterVector, loss_obj, frames: Tensor,
                pcfg: PolicyConfig, alpha: float, n_steps: int,
                clip_lo: float = -30.0, clip_hi: float = 30.0,
                retain_higher_order: bool = True, first_order: bool = False,
                compute_post: bool = False) -> AdaptResult:
    """Gradient-descend the adaptation objective from ``theta``.

    The demonstration is observation-only, so the state input is zeroed.
    Inner gradients are clipped elementwise to [clip_lo, clip_hi].  With
    ``retain_higher_order`` the update graph stays differentiable w.r.t. both
    theta and the loss parameters; ``first_order`` detaches the inner
    gradient instead (cheap approximation, used for comparison only).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    t = frames.shape[0]
    zero_states = T.tensor(np.zeros((t, pcfg.state_dim)))
    cur = theta
    loss_pre = None
    for _ in range(n_steps):
        _, _, _, acts = policy_forward_seq(cur, pcfg, frames, zero_states)
        inner_loss = loss_obj.loss(acts)
        if loss_pre is None:
            loss_pre = float(inner_loss.data)
        if not np.isfinite(inner_loss.data):
            raise FloatingPointError("non-finite adaptation loss")
        g = T.grad(inner_loss, cur, retain_higher_order=retain_higher_order and not first_order)
        for name, gi in g.items():
            if not np.all(np.isfinite(gi.data)):
                raise FloatingPointError(f"non-finite inner gradient for {name}")
        if first_order:
            g = g.detach()
        cur = cur.zip_with(g, lambda p, gi: T.sub(p, T.mul(T.clip(gi, clip_lo, clip_hi),
                                                           alpha)))
    loss_post = None
    if compute_post:
        with T.no_grad():
            frozen = cur.detach()
            _, _, _, acts = policy_forward_seq(frozen, pcfg, frames, zero_states)
            loss_post = float(loss_obj.loss(acts).data)
    return AdaptResult(phi=cur, loss_pre=loss_pre, loss_post=loss_post)
