"""Comparison methods: contextual policy and a recurrent demo-conditioned policy.

Both condition on the demonstration without any test-time parameter update:
the contextual policy sees only the demo's final frame next to the current
observation; the recurrent policy folds the whole demo through a gated cell
and threads that state across robot timesteps.  Both clone actions with the
same loss the adaptive methods use (bc_terms is imported, not reimplemented).
"""

from __future__ import annotations

import time

import numpy as np

from . import nn, sim
from . import tensor as T
from .metalearn import (AdamState, DemoTensors, MetaConfig, TrainLogRow,
                        adam_update, bc_terms, draw_meta_batch)
from .params import ParameterVector
from .policy import MdnSeq, PolicyConfig, conv_feature_points, pick_action
from .tensor import Tensor

BASELINE_METHODS = ("contextual", "recurrent")
GRU_GATES = ("update", "reset", "cand")


def _head_entries(cfg: PolicyConfig, hidden: int) -> list:
    m, a = cfg.mdn_modes, cfg.action_dim
    return [
        ("mdn/logits_w", T.parameter(np.zeros((hidden, m)))),
        ("mdn/logits_b", T.parameter(np.zeros(m))),
        ("mdn/means_w", T.parameter(np.zeros((hidden, m * a)))),
        ("mdn/means_b", T.parameter(np.zeros(m * a))),
        ("mdn/log_sigmas_w", T.parameter(np.zeros((hidden, m)))),
        ("mdn/log_sigmas_b", T.parameter(np.zeros(m))),
        ("grip/w", T.parameter(np.zeros((hidden, 1)))),
        ("grip/b", T.parameter(np.zeros(1))),
        ("pose/w", T.parameter(np.zeros((cfg.feature_dim, cfg.pose_dim)))),
        ("pose/b", T.parameter(np.zeros(cfg.pose_dim))),
        ("loc/w", T.parameter(np.zeros((cfg.feature_dim, 2)))),
        ("loc/b", T.parameter(np.zeros(2))),
    ]


def _conv_entries(cfg: PolicyConfig, rng: np.random.Generator) -> list:
    entries = []
    k = cfg.conv_kernel
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.conv_channels):
        fan_in = k * k * cin
        entries.append((f"conv{i}/w",
                        T.parameter(nn.fan_in_uniform(rng, (k, k, cin, cout), fan_in))))
        entries.append((f"conv{i}/b", T.parameter(np.zeros(cout))))
        entries.append((f"conv{i}/ln_gain", T.parameter(np.ones(cout))))
        entries.append((f"conv{i}/ln_off", T.parameter(np.zeros(cout))))
        cin = cout
    return entries


def _heads(params: ParameterVector, cfg: PolicyConfig, h: Tensor, f: Tensor,
           t: int) -> tuple[MdnSeq, Tensor, Tensor, Tensor]:
    m, a = cfg.mdn_modes, cfg.action_dim
    logits = T.add(T.matmul(h, params["mdn/logits_w"]), params["mdn/logits_b"])
    means = T.reshape(T.add(T.matmul(h, params["mdn/means_w"]), params["mdn/means_b"]),
                      (t, m, a))
    log_sigmas = T.add(T.matmul(h, params["mdn/log_sigmas_w"]), params["mdn/log_sigmas_b"])
    grip = T.reshape(T.add(T.matmul(h, params["grip/w"]), params["grip/b"]), (t,))
    pose = T.add(T.matmul(f, params["pose/w"]), params["pose/b"])
    loc = T.add(T.matmul(f, params["loc/w"]), params["loc/b"])
    return MdnSeq(logits, means, log_sigmas), grip, pose, loc


# ---------------------------------------------------------------------------
# contextual policy


def init_contextual_params(cfg: PolicyConfig, rng: np.random.Generator) -> ParameterVector:
    entries = _conv_entries(cfg, rng)
    din = 2 * cfg.feature_dim + cfg.state_dim
    for j in range(cfg.fc_layers):
        entries.append((f"fc{j}/w",
                        T.parameter(nn.fan_in_uniform(rng, (din, cfg.fc_width), din))))
        entries.append((f"fc{j}/b", T.parameter(np.zeros(cfg.fc_width))))
        entries.append((f"fc{j}/ln_gain", T.parameter(np.ones(cfg.fc_width))))
        entries.append((f"fc{j}/ln_off", T.parameter(np.zeros(cfg.fc_width))))
        din = cfg.fc_width
    entries.extend(_head_entries(cfg, cfg.fc_width))
    return ParameterVector(entries)


def contextual_forward_seq(params: ParameterVector, cfg: PolicyConfig,
                           frames: Tensor, states: Tensor, human_final: Tensor
                           ) -> tuple[MdnSeq, Tensor, Tensor, Tensor]:
    """Condition every robot step on the demo's last frame.

    frames [T, H, W, 3], states [T, S], human_final [1, H, W, 3] ->
    (MdnSeq, gripper logits [T], pose [T, 2], gripper track [T, 2]).
    """
    t = frames.shape[0]
    f = conv_feature_points(params, cfg, frames)
    fh = conv_feature_points(params, cfg, human_final)
    z = T.concat([f, T.broadcast_to(fh, (t, cfg.feature_dim)), states], axis=1)
    for j in range(cfg.fc_layers):
        z = T.add(T.matmul(z, params[f"fc{j}/w"]), params[f"fc{j}/b"])
        z = T.layer_norm(z, params[f"fc{j}/ln_gain"], params[f"fc{j}/ln_off"], axes=(1,))
        z = T.relu(z)
    return _heads(params, cfg, z, f, t)


def contextual_forward(params: ParameterVector, cfg: PolicyConfig,
                       o_robot: Tensor, state: Tensor, human_final_frame: Tensor
                       ) -> tuple[nn.MdnParams, Tensor]:
    """Single-step interface: [H, W, 3] observation in, action distribution out."""
    frames = T.reshape(o_robot, (1,) + tuple(o_robot.shape))
    states = T.reshape(state, (1, state.shape[0]))
    hf = T.reshape(human_final_frame, (1,) + tuple(human_final_frame.shape))
    mdn_seq, grip, _pose, _loc = contextual_forward_seq(params, cfg, frames, states, hf)
    m, a = cfg.mdn_modes, cfg.action_dim
    mdn = nn.MdnParams(T.reshape(mdn_seq.logits, (m,)),
                       T.reshape(mdn_seq.means, (m, a)),
                       T.reshape(mdn_seq.log_sigmas, (m,)))
    return mdn, T.reshape(grip, ())


# ---------------------------------------------------------------------------
# recurrent policy


def init_recurrent_params(cfg: PolicyConfig, rng: np.random.Generator,
                          hidden: int = 64) -> ParameterVector:
    entries = _conv_entries(cfg, rng)
    din = cfg.feature_dim + cfg.state_dim
    for gate in GRU_GATES:
        entries.append((f"gru/{gate}_w",
                        T.parameter(nn.fan_in_uniform(rng, (din, hidden), din))))
        entries.append((f"gru/{gate}_u",
                        T.parameter(nn.fan_in_uniform(rng, (hidden, hidden), hidden))))
        entries.append((f"gru/{gate}_b", T.parameter(np.zeros(hidden))))
    entries.extend(_head_entries(cfg, hidden))
    return ParameterVector(entries)


def recurrent_hidden_size(params: ParameterVector) -> int:
    return params["gru/update_b"].shape[0]


def gru_step(params: ParameterVector, x: Tensor, h: Tensor) -> Tensor:
    """One gated update; x [B, din], h [B, hidden] -> [B, hidden]."""
    def gate(name, activation, hin):
        pre = T.add(T.add(T.matmul(x, params[f"gru/{name}_w"]),
                          T.matmul(hin, params[f"gru/{name}_u"])),
                    params[f"gru/{name}_b"])
        return activation(pre)

    z = gate("update", T.sigmoid, h)
    r = gate("reset", T.sigmoid, h)
    n = gate("cand", T.tanh, T.mul(r, h))
    return T.add(T.mul(z, h), T.mul(T.sub(1.0, z), n))


def encode_demo(params: ParameterVector, cfg: PolicyConfig, frames: Tensor) -> Tensor:
    """Fold demo frames through the cell from a zero state; [1, hidden] out.

    Demonstrations carry no state readings, so the state slot is zeroed,
    matching how adaptive methods treat observation-only demos.
    """
    f = conv_feature_points(params, cfg, frames)
    t = frames.shape[0]
    hidden = recurrent_hidden_size(params)
    h = T.tensor(np.zeros((1, hidden)))
    zero_state = T.tensor(np.zeros((1, cfg.state_dim)))
    for i in range(t):
        x = T.concat([f[i:i + 1], zero_state], axis=1)
        h = gru_step(params, x, h)
    return h


def recurrent_forward(params: ParameterVector, cfg: PolicyConfig,
                      human_frames: Tensor, o_t: Tensor, s_t: Tensor,
                      carried: Tensor | None = None
                      ) -> tuple[nn.MdnParams, Tensor, Tensor]:
    """One robot step: update the carried state, read the heads off it.

    The demo is folded in exactly once: on the first call (no carried state)
    it seeds the cell; afterwards callers thread the returned state.
    """
    if carried is None:
        carried = encode_demo(params, cfg, human_frames)
    frames = T.reshape(o_t, (1,) + tuple(o_t.shape))
    f = conv_feature_points(params, cfg, frames)
    x = T.concat([f, T.reshape(s_t, (1, s_t.shape[0]))], axis=1)
    h = gru_step(params, x, carried)
    mdn_seq, grip, _pose, _loc = _heads(params, cfg, h, f, 1)
    m, a = cfg.mdn_modes, cfg.action_dim
    mdn = nn.MdnParams(T.reshape(mdn_seq.logits, (m,)),
                       T.reshape(mdn_seq.means, (m, a)),
                       T.reshape(mdn_seq.log_sigmas, (m,)))
    return mdn, T.reshape(grip, ()), h


def recurrent_forward_seq(params: ParameterVector, cfg: PolicyConfig,
                          human_frames: Tensor, frames: Tensor, states: Tensor
                          ) -> tuple[MdnSeq, Tensor, Tensor, Tensor]:
    """Training pass: encode the demo once, then scan the robot steps."""
    t = frames.shape[0]
    f = conv_feature_points(params, cfg, frames)
    h = encode_demo(params, cfg, human_frames)
    rows = []
    for i in range(t):
        x = T.concat([f[i:i + 1], states[i:i + 1]], axis=1)
        h = gru_step(params, x, h)
        rows.append(h)
    hs = T.concat(rows, axis=0)
    return _heads(params, cfg, hs, f, t)


# ---------------------------------------------------------------------------
# training (plain behavior cloning, same loss and batch plumbing as the
# adaptive methods, no inner loop)


def baseline_loss(method: str, params: ParameterVector, cfg: PolicyConfig,
                  human_frames: Tensor, demo: DemoTensors, mcfg: MetaConfig) -> Tensor:
    if method == "contextual":
        hf = human_frames[human_frames.shape[0] - 1:human_frames.shape[0]]
        mdn_seq, grip, pose, loc = contextual_forward_seq(params, cfg, demo.frames,
                                                          demo.states, hf)
    elif method == "recurrent":
        mdn_seq, grip, pose, loc = recurrent_forward_seq(params, cfg, human_frames,
                                                         demo.frames, demo.states)
    else:
        raise ValueError(f"unknown baseline {method!r}")
    return bc_terms(mdn_seq, grip, pose, demo.actions, demo.final_pose,
                    mcfg.bc_mode, mcfg.pose_weight,
                    loc_seq=loc, loc_target=demo.states.data[:, :2],
                    loc_weight=mcfg.loc_weight)


def init_baseline_params(method: str, cfg: PolicyConfig,
                         rng: np.random.Generator) -> ParameterVector:
    if method == "contextual":
        return init_contextual_params(cfg, rng)
    if method == "recurrent":
        return init_recurrent_params(cfg, rng)
    raise ValueError(f"unknown baseline {method!r}")


def baseline_train(tasks, method: str, params: ParameterVector, mcfg: MetaConfig,
                   pcfg: PolicyConfig, rng: np.random.Generator,
                   brightness_aug: float = 0.0, log_cb=None
                   ) -> tuple[ParameterVector, list[TrainLogRow]]:
    """Supervised cloning over the same task/demo sampling as meta-training."""
    opt = AdamState.fresh(params)
    log: list[TrainLogRow] = []
    for it in range(mcfg.iterations):
        t0 = time.perf_counter()
        batch = draw_meta_batch(rng, tasks, mcfg, brightness_aug)
        acc = {n: np.zeros_like(p.data) for n, p in params.items()}
        vals = []
        for human_frames, robot_demo in batch:
            loss = baseline_loss(method, params, pcfg, human_frames, robot_demo, mcfg)
            if not np.isfinite(loss.data):
                raise FloatingPointError("non-finite cloning loss")
            g = T.grad(loss, params)
            for name, gi in g.items():
                acc[name] += gi.data
            vals.append(float(loss.data))
        b = float(len(batch))
        grads = ParameterVector((n, T.tensor(a / b)) for n, a in acc.items())
        params, opt = adam_update(params, grads, opt, mcfg.outer_step_size)
        mean_loss = float(np.mean(vals))
        row = TrainLogRow(iteration=it, outer_loss=mean_loss,
                          inner_loss_pre=mean_loss, inner_loss_post=mean_loss,
                          wall_time_ms=(time.perf_counter() - t0) * 1000.0)
        log.append(row)
        if log_cb is not None:
            log_cb(row)
    return params, log


# ---------------------------------------------------------------------------
# rollout drivers


def make_contextual_driver(params: ParameterVector, cfg: PolicyConfig,
                           human_frames_u8: np.ndarray, rng: np.random.Generator,
                           bc_mode: str = "mdn_nll"):
    final = T.tensor(sim.dequantize(human_frames_u8[-1]))

    def drive(frame_u8, state_vec, world):
        with T.no_grad():
            mdn, grip_logit = contextual_forward(
                params, cfg, T.tensor(sim.dequantize(frame_u8)),
                T.tensor(state_vec), final)
        return pick_action(mdn, grip_logit, rng, bc_mode)

    return drive


def make_recurrent_driver(params: ParameterVector, cfg: PolicyConfig,
                          human_frames_u8: np.ndarray, rng: np.random.Generator,
                          bc_mode: str = "mdn_nll"):
    human = T.tensor(sim.dequantize(human_frames_u8))
    carried = [None]

    def drive(frame_u8, state_vec, world):
        with T.no_grad():
            mdn, grip_logit, nxt = recurrent_forward(
                params, cfg, human, T.tensor(sim.dequantize(frame_u8)),
                T.tensor(state_vec), carried[0])
        carried[0] = nxt
        return pick_action(mdn, grip_logit, rng, bc_mode)

    return drive
