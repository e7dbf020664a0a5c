"""Vision policy: conv stack -> spatial feature points -> FC stack -> heads.

The network consumes a whole trajectory at once (leading T axis) so that an
adaptation step over a demonstration is a handful of big ops instead of
per-frame graphs.  Heads: mixture density over the 2-D velocity, a gripper
logit, and a linear prediction of the final gripper pose computed from the
feature points and fed back into the FC stack each timestep.

Final output layers start at zero (a fresh policy emits exactly zero means,
zero gripper logit, zero pose); everything else is fan-in uniform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn, sim
from . import tensor as T
from .params import ParameterVector
from .tensor import Tensor


@dataclass(frozen=True)
class PolicyConfig:
    image_hw: int = 24
    in_channels: int = 3
    conv_channels: tuple = (16, 16, 16)
    conv_kernel: int = 3
    conv_strides: tuple = (2, 2, 1)
    fc_width: int = 64
    fc_layers: int = 3
    mdn_modes: int = 20
    action_dim: int = 2
    state_dim: int = 4
    bias_dim: int = 20
    pose_dim: int = 2
    attn_temp: float = 0.2

    def __post_init__(self):
        if len(self.conv_channels) != len(self.conv_strides):
            raise ValueError("conv_channels and conv_strides must align")
        if self.fc_layers < 1 or self.mdn_modes < 1:
            raise ValueError("fc_layers and mdn_modes must be positive")
        if self.attn_temp <= 0:
            raise ValueError("attn_temp must be positive")

    @property
    def feature_dim(self) -> int:
        return 2 * self.conv_channels[-1]

    @property
    def fc_input_dim(self) -> int:
        # feature points enter twice: absolute and relative to the gripper
        return 2 * self.feature_dim + self.state_dim + self.bias_dim + self.pose_dim


class MdnSeq(NamedTuple):
    logits: Tensor      # [T, M]
    means: Tensor       # [T, M, A]
    log_sigmas: Tensor  # [T, M]


@dataclass
class PolicyActivations:
    """Slices the adaptation objective reads: feature points and last hidden.

    ``loc`` is the auxiliary gripper-position readout; it never feeds the
    action heads, it only calibrates the feature points during cloning.
    """
    f: Tensor  # [T, 2*C]
    h: Tensor  # [T, fc_width]
    loc: Tensor | None = None  # [T, 2]


def init_policy_params(cfg: PolicyConfig, rng: np.random.Generator) -> ParameterVector:
    entries: list[tuple[str, Tensor]] = []
    k = cfg.conv_kernel
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.conv_channels):
        fan_in = k * k * cin
        entries.append((f"conv{i}/w", T.parameter(nn.fan_in_uniform(rng, (k, k, cin, cout), fan_in))))
        entries.append((f"conv{i}/b", T.parameter(np.zeros(cout))))
        entries.append((f"conv{i}/ln_gain", T.parameter(np.ones(cout))))
        entries.append((f"conv{i}/ln_off", T.parameter(np.zeros(cout))))
        cin = cout
    feat = cfg.feature_dim
    entries.append(("pose/w", T.parameter(np.zeros((feat, cfg.pose_dim)))))
    entries.append(("pose/b", T.parameter(np.zeros(cfg.pose_dim))))
    entries.append(("loc/w", T.parameter(np.zeros((feat, 2)))))
    entries.append(("loc/b", T.parameter(np.zeros(2))))
    entries.append(("bias_transform", T.parameter(np.zeros(cfg.bias_dim))))
    din = cfg.fc_input_dim
    for j in range(cfg.fc_layers):
        entries.append((f"fc{j}/w", T.parameter(nn.fan_in_uniform(rng, (din, cfg.fc_width), din))))
        entries.append((f"fc{j}/b", T.parameter(np.zeros(cfg.fc_width))))
        entries.append((f"fc{j}/ln_gain", T.parameter(np.ones(cfg.fc_width))))
        entries.append((f"fc{j}/ln_off", T.parameter(np.zeros(cfg.fc_width))))
        din = cfg.fc_width
    m, a = cfg.mdn_modes, cfg.action_dim
    w = cfg.fc_width
    entries.append(("mdn/logits_w", T.parameter(np.zeros((w, m)))))
    entries.append(("mdn/logits_b", T.parameter(np.zeros(m))))
    entries.append(("mdn/means_w", T.parameter(np.zeros((w, m * a)))))
    entries.append(("mdn/means_b", T.parameter(np.zeros(m * a))))
    entries.append(("mdn/log_sigmas_w", T.parameter(np.zeros((w, m)))))
    entries.append(("mdn/log_sigmas_b", T.parameter(np.zeros(m))))
    entries.append(("grip/w", T.parameter(np.zeros((w, 1)))))
    entries.append(("grip/b", T.parameter(np.zeros(1))))
    return ParameterVector(entries)


def conv_feature_points(params: ParameterVector, cfg: PolicyConfig,
                        frames: Tensor, prefix: str = "conv") -> Tensor:
    """Run the conv stack on [T, H, W, C] frames; return feature points [T, 2C]."""
    x = frames
    for i, stride in enumerate(cfg.conv_strides):
        x = T.conv2d(x, params[f"{prefix}{i}/w"], stride=stride)
        x = T.add(x, params[f"{prefix}{i}/b"])
        x = T.layer_norm(x, params[f"{prefix}{i}/ln_gain"], params[f"{prefix}{i}/ln_off"],
                         axes=(1, 2, 3))
        x = T.relu(x)
    return nn.spatial_soft_argmax_seq(x, cfg.attn_temp)


def policy_forward_seq(params: ParameterVector, cfg: PolicyConfig,
                       frames: Tensor, states: Tensor,
                       pose_override: Tensor | None = None
                       ) -> tuple[MdnSeq, Tensor, Tensor, PolicyActivations]:
    """Whole-trajectory forward pass.

    frames [T, H, W, 3], states [T, state_dim] ->
    (MdnSeq, gripper logits [T], predicted pose [T, 2], activations).
    The pose head reads the feature points; its prediction (or the override)
    joins the FC input alongside state and the bias transformation.
    """
    t = frames.shape[0]
    f = conv_feature_points(params, cfg, frames)
    pose = T.add(T.matmul(f, params["pose/w"]), params["pose/b"])
    loc = T.add(T.matmul(f, params["loc/w"]), params["loc/b"])
    pose_in = pose if pose_override is None else pose_override
    bias = T.broadcast_to(T.reshape(params["bias_transform"], (1, cfg.bias_dim)),
                          (t, cfg.bias_dim))
    # body-centric copy of the feature points: the servo law depends on
    # keypoint offsets from the gripper, which relus learn slowly from
    # absolute coordinates alone
    c = cfg.conv_channels[-1]
    grip_xy = T.reshape(T.getitem(states, (slice(None), slice(0, 2))), (t, 1, 2))
    rel = T.sub(T.reshape(f, (t, c, 2)), T.broadcast_to(grip_xy, (t, c, 2)))
    z = T.concat([f, T.reshape(rel, (t, 2 * c)), states, bias, pose_in], axis=1)
    for j in range(cfg.fc_layers):
        z = T.add(T.matmul(z, params[f"fc{j}/w"]), params[f"fc{j}/b"])
        z = T.layer_norm(z, params[f"fc{j}/ln_gain"], params[f"fc{j}/ln_off"], axes=(1,))
        z = T.relu(z)
    h = z
    m, a = cfg.mdn_modes, cfg.action_dim
    logits = T.add(T.matmul(h, params["mdn/logits_w"]), params["mdn/logits_b"])
    means = T.reshape(T.add(T.matmul(h, params["mdn/means_w"]), params["mdn/means_b"]),
                      (t, m, a))
    log_sigmas = T.add(T.matmul(h, params["mdn/log_sigmas_w"]), params["mdn/log_sigmas_b"])
    grip = T.reshape(T.add(T.matmul(h, params["grip/w"]), params["grip/b"]), (t,))
    return MdnSeq(logits, means, log_sigmas), grip, pose, PolicyActivations(f=f, h=h, loc=loc)


def policy_forward(params: ParameterVector, cfg: PolicyConfig,
                   obs: Tensor, state: Tensor,
                   pose_override: Tensor | None = None):
    """Single-frame wrapper: [H, W, 3] and [state_dim] in, per-step heads out."""
    frames = T.reshape(obs, (1,) + tuple(obs.shape))
    states = T.reshape(state, (1, state.shape[0]))
    po = None if pose_override is None else T.reshape(pose_override, (1, -1))
    mdn_seq, grip, pose, acts = policy_forward_seq(params, cfg, frames, states, po)
    m, a = cfg.mdn_modes, cfg.action_dim
    mdn = nn.MdnParams(T.reshape(mdn_seq.logits, (m,)),
                       T.reshape(mdn_seq.means, (m, a)),
                       T.reshape(mdn_seq.log_sigmas, (m,)))
    return (mdn, T.reshape(grip, ()), T.reshape(pose, (cfg.pose_dim,)),
            PolicyActivations(f=acts.f, h=acts.h, loc=acts.loc))


def pick_action(mdn: nn.MdnParams, grip_logit: Tensor, rng: np.random.Generator,
                bc_mode: str) -> np.ndarray:
    """Head outputs -> concrete action.

    mdn_nll mode samples 100 candidates and keeps the densest; l1_l2 mode
    emits the mixture mean.  Gripper closes when its sigmoid crosses 0.5.
    """
    if bc_mode == "l1_l2":
        w = np.exp(mdn.logits.data - mdn.logits.data.max())
        w = w / w.sum()
        xy = (w[:, None] * mdn.means.data).sum(axis=0)
    else:
        xy = nn.mdn_select_action(mdn, rng)
    g = 1.0 if 1.0 / (1.0 + np.exp(-float(grip_logit.data))) > 0.5 else 0.0
    return np.array([xy[0], xy[1], g])


def make_policy_driver(params: ParameterVector, cfg: PolicyConfig,
                       rng: np.random.Generator, bc_mode: str = "mdn_nll"):
    """Turn policy params into a sim-compatible controller."""
    def drive(frame_u8, state_vec, world):
        with T.no_grad():
            mdn, grip_logit, _pose, _ = policy_forward(
                params, cfg, T.tensor(sim.dequantize(frame_u8)), T.tensor(state_vec))
        return pick_action(mdn, grip_logit, rng, bc_mode)

    return drive


def rollout(params: ParameterVector, cfg: PolicyConfig, scfg: sim.SimConfig,
            task: sim.TaskSpec, rng: np.random.Generator,
            horizon: int | None = None, style: sim.DomainStyle | None = None,
            bc_mode: str = "mdn_nll") -> sim.Trajectory:
    """Run the policy in the robot domain for ``horizon`` steps (default 100)."""
    driver = make_policy_driver(params, cfg, rng, bc_mode)
    return sim.run_episode(scfg, task, style or sim.robot_style(), driver,
                           horizon or scfg.horizon)
