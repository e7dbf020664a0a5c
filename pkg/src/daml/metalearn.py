"""Outer loop: behavior cloning loss, Adam, and meta-training.

Each outer term adapts the policy on one observation-only demo via the inner
step, scores the adapted policy's behavior cloning loss on one action-labeled
demo of the same task, and backpropagates through the whole construction to
both the policy init and the adaptation-loss parameters.  One Adam state
covers the joint vector.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn, sim
from . import tensor as T
from .adaptloss import inner_adapt
from .params import ParameterVector, merge, split
from .policy import MdnSeq, PolicyConfig, policy_forward_seq
from .tensor import Tensor

BC_MODES = ("mdn_nll", "l1_l2")


@dataclass(frozen=True)
class MetaConfig:
    inner_step_size: float = 0.005
    outer_step_size: float = 0.001
    inner_steps: int = 5
    clip_lo: float = -30.0
    clip_hi: float = 30.0
    meta_batch_size: int = 10
    iterations: int = 1000
    bc_mode: str = "mdn_nll"
    pose_weight: float = 0.1
    loc_weight: float = 1.0
    demo_subsample: int = 40
    brightness_aug: float = 0.0

    def __post_init__(self):
        if self.inner_step_size < 0:
            raise ValueError("inner step size must be non-negative")
        if self.inner_steps < 1:
            raise ValueError("at least one inner step")
        if self.clip_lo >= self.clip_hi:
            raise ValueError("clip range is empty")
        if self.meta_batch_size < 1 or self.iterations < 0:
            raise ValueError("bad batch size or iteration count")
        if self.bc_mode not in BC_MODES:
            raise ValueError(f"unknown bc mode {self.bc_mode!r}")
        if self.demo_subsample < 19:
            raise ValueError("subsample length below the adaptation-loss minimum")
        if not 0.0 <= self.brightness_aug <= 1.0:
            raise ValueError("brightness augmentation must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment estimates plus the step counter, keyed by name."""

    def __init__(self, step: int, m: dict[str, np.ndarray], v: dict[str, np.ndarray]):
        self.step = step
        self.m = m
        self.v = v

    @classmethod
    def fresh(cls, params: ParameterVector) -> "AdamState":
        return cls(0,
                   {n: np.zeros_like(t.data) for n, t in params.items()},
                   {n: np.zeros_like(t.data) for n, t in params.items()})


def adam_update(params: ParameterVector, grads: ParameterVector, state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> tuple[ParameterVector, AdamState]:
    """One bias-corrected Adam step; returns fresh leaves and a fresh state."""
    step = state.step + 1
    new_m, new_v, out = {}, {}, []
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads[name].data
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
        out.append((name, T.parameter(new)))
    return ParameterVector(out), AdamState(step, new_m, new_v)


# ---------------------------------------------------------------------------
# behavior cloning loss (the one implementation every method trains with)


def bc_terms(mdn_seq: MdnSeq, grip_logits: Tensor, pose_seq: Tensor,
             actions: np.ndarray, final_pose: np.ndarray,
             bc_mode: str, pose_weight: float,
             loc_seq: Tensor | None = None, loc_target: np.ndarray | None = None,
             loc_weight: float = 0.0) -> Tensor:
    """Sum over timesteps of action NLL (or l1+l2), gripper CE, and pose error.

    When a predicted gripper track and its target are given, their squared
    error joins the sum; this pins the feature-point coordinates to world
    units without feeding the action heads anything new.
    """
    actions = np.asarray(actions, dtype=np.float64)
    xy = T.tensor(actions[:, :2])
    grip_labels = T.tensor(actions[:, 2])
    if bc_mode == "mdn_nll":
        cont = nn.mdn_nll_seq(mdn_seq.logits, mdn_seq.means, mdn_seq.log_sigmas, xy)
    elif bc_mode == "l1_l2":
        t, m, a = mdn_seq.means.shape
        w = T.reshape(T.softmax(mdn_seq.logits, axis=1), (t, m, 1))
        mu = T.tsum(T.mul(w, mdn_seq.means), axis=1)          # mixture mean, [T, A]
        diff = T.sub(xy, mu)
        l1 = T.tsum(T.add(T.relu(diff), T.relu(T.neg(diff))), axis=1)
        l2 = T.tsum(T.mul(diff, diff), axis=1)
        cont = T.add(l1, T.mul(l2, 0.01))
    else:
        raise ValueError(f"unknown bc mode {bc_mode!r}")
    ce = nn.gripper_ce_seq(grip_logits, grip_labels)
    pd = T.sub(pose_seq, T.tensor(np.asarray(final_pose, dtype=np.float64)))
    pose_err = T.tsum(T.mul(pd, pd), axis=1)
    total = T.add(T.add(T.tsum(cont), T.tsum(ce)), T.mul(T.tsum(pose_err), pose_weight))
    if loc_seq is not None and loc_weight > 0.0:
        ld = T.sub(loc_seq, T.tensor(np.asarray(loc_target, dtype=np.float64)))
        total = T.add(total, T.mul(T.tsum(T.mul(ld, ld)), loc_weight))
    return total


@dataclass
class DemoTensors:
    """A subsampled, float-converted robot demo ready for the loss."""
    frames: Tensor            # [T, H, W, 3] in [0,1]
    states: Tensor            # [T, state_dim]
    actions: np.ndarray       # [T, 3]
    final_pose: np.ndarray    # [2]


def bc_loss(phi: ParameterVector, demo: DemoTensors, mcfg: MetaConfig,
            pcfg: PolicyConfig) -> Tensor:
    """Behavior cloning loss of the (adapted) policy on one robot demo."""
    if getattr(demo, "actions", None) is None:
        raise ValueError("behavior cloning needs an action-labeled demo")
    mdn_seq, grip, pose, acts = policy_forward_seq(phi, pcfg, demo.frames, demo.states)
    return bc_terms(mdn_seq, grip, pose, demo.actions, demo.final_pose,
                    mcfg.bc_mode, mcfg.pose_weight,
                    loc_seq=acts.loc, loc_target=demo.states.data[:, :2],
                    loc_weight=mcfg.loc_weight)


# ---------------------------------------------------------------------------
# demo plumbing


def subsample_indices(rng: np.random.Generator, demo_len: int, target: int) -> np.ndarray:
    """Uniform draw without replacement, returned in temporal order."""
    k = min(target, demo_len)
    return np.sort(rng.choice(demo_len, size=k, replace=False))


def frames_to_tensor(frames_u8: np.ndarray, brightness: float = 0.0) -> Tensor:
    x = sim.dequantize(frames_u8)
    if brightness != 0.0:
        x = np.clip(x + brightness, 0.0, 1.0)
    return T.tensor(x)


def sample_human_frames(rng: np.random.Generator, demo: sim.HumanDemo,
                        mcfg: MetaConfig, brightness_aug: float = 0.0) -> Tensor:
    idx = subsample_indices(rng, demo.frames.shape[0], mcfg.demo_subsample)
    b = rng.uniform(-brightness_aug, brightness_aug) if brightness_aug > 0 else 0.0
    return frames_to_tensor(demo.frames[idx], b)


def sample_robot_demo(rng: np.random.Generator, demo: sim.RobotDemo,
                      mcfg: MetaConfig, brightness_aug: float = 0.0) -> DemoTensors:
    idx = subsample_indices(rng, demo.frames.shape[0], mcfg.demo_subsample)
    b = rng.uniform(-brightness_aug, brightness_aug) if brightness_aug > 0 else 0.0
    return DemoTensors(frames=frames_to_tensor(demo.frames[idx], b),
                       states=T.tensor(demo.states[idx].astype(np.float64)),
                       actions=demo.actions[idx].astype(np.float64),
                       final_pose=demo.final_pose.astype(np.float64))


# ---------------------------------------------------------------------------
# meta-training


class StepMetrics(NamedTuple):
    outer_loss: float
    inner_loss_pre: float
    inner_loss_post: float


def meta_train_step(theta: ParameterVector, loss_obj, batch, mcfg: MetaConfig,
                    pcfg: PolicyConfig, opt: AdamState,
                    ) -> tuple[ParameterVector, object, AdamState, StepMetrics]:
    """One joint outer update from a batch of (human frames, robot demo) pairs.

    Per-task outer gradients are averaged in batch order (fixed reduction
    order, so reruns are bit-identical).
    """
    joint = merge({"theta": theta, "psi": loss_obj.params})
    acc = {n: np.zeros_like(t.data) for n, t in joint.items()}
    outer_vals, pre_vals, post_vals = [], [], []
    for human_frames, robot_demo in batch:
        res = inner_adapt(theta, loss_obj, human_frames, pcfg,
                          mcfg.inner_step_size, mcfg.inner_steps,
                          mcfg.clip_lo, mcfg.clip_hi, compute_post=True)
        outer = bc_loss(res.phi, robot_demo, mcfg, pcfg)
        if not np.isfinite(outer.data):
            raise FloatingPointError("non-finite outer loss")
        g = T.grad(outer, joint, retain_higher_order=False)
        for name, gi in g.items():
            acc[name] += gi.data
        outer_vals.append(float(outer.data))
        pre_vals.append(res.loss_pre)
        post_vals.append(res.loss_post)
    b = float(len(batch))
    grads = ParameterVector((n, T.tensor(a / b)) for n, a in acc.items())
    new_joint, opt = adam_update(joint, grads, opt, mcfg.outer_step_size)
    parts = split(new_joint, ["theta", "psi"])
    new_loss_obj = loss_obj.with_params(parts["psi"])
    metrics = StepMetrics(outer_loss=float(np.mean(outer_vals)),
                          inner_loss_pre=float(np.mean(pre_vals)),
                          inner_loss_post=float(np.mean(post_vals)))
    return parts["theta"], new_loss_obj, opt, metrics


@dataclass
class TrainLogRow:
    iteration: int
    outer_loss: float
    inner_loss_pre: float
    inner_loss_post: float
    wall_time_ms: float


def draw_meta_batch(rng: np.random.Generator, tasks, mcfg: MetaConfig,
                    brightness_aug: float):
    """Sample distinct tasks, one human + one robot demo each, subsampled."""
    if len(tasks) < mcfg.meta_batch_size:
        raise ValueError(f"dataset has {len(tasks)} tasks, "
                         f"batch needs {mcfg.meta_batch_size}")
    picks = rng.choice(len(tasks), size=mcfg.meta_batch_size, replace=False)
    batch = []
    for ti in picks:
        task = tasks[int(ti)]
        if not task.humans or not task.robots:
            raise ValueError("task record is missing demos")
        hd = task.humans[int(rng.integers(len(task.humans)))]
        rd = task.robots[int(rng.integers(len(task.robots)))]
        batch.append((sample_human_frames(rng, hd, mcfg, brightness_aug),
                      sample_robot_demo(rng, rd, mcfg, brightness_aug)))
    return batch


def meta_train(tasks, theta: ParameterVector, loss_obj, mcfg: MetaConfig,
               pcfg: PolicyConfig, rng: np.random.Generator,
               brightness_aug: float = 0.0, log_cb=None,
               ) -> tuple[ParameterVector, object, list[TrainLogRow]]:
    """Run ``mcfg.iterations`` outer updates over the task set."""
    joint = merge({"theta": theta, "psi": loss_obj.params})
    opt = AdamState.fresh(joint)
    log: list[TrainLogRow] = []
    for it in range(mcfg.iterations):
        t0 = time.perf_counter()
        batch = draw_meta_batch(rng, tasks, mcfg, brightness_aug)
        theta, loss_obj, opt, metrics = meta_train_step(
            theta, loss_obj, batch, mcfg, pcfg, opt)
        row = TrainLogRow(iteration=it, outer_loss=metrics.outer_loss,
                          inner_loss_pre=metrics.inner_loss_pre,
                          inner_loss_post=metrics.inner_loss_post,
                          wall_time_ms=(time.perf_counter() - t0) * 1000.0)
        log.append(row)
        if log_cb is not None:
            log_cb(row)
    return theta, loss_obj, log


def meta_test_adapt(theta: ParameterVector, loss_obj, human_frames: Tensor,
                    mcfg: MetaConfig, pcfg: PolicyConfig) -> ParameterVector:
    """Adaptation exactly as in training, minus the higher-order bookkeeping."""
    res = inner_adapt(theta, loss_obj, human_frames, pcfg,
                      mcfg.inner_step_size, mcfg.inner_steps,
                      mcfg.clip_lo, mcfg.clip_hi, retain_higher_order=False)
    return res.phi.detach()
