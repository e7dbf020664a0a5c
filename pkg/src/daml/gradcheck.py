"""Self-contained numeric audit of the differentiation machinery.

Four families of checks, each reported with its worst relative error:
per-primitive reverse-mode gradients against central finite differences,
meta-gradients through the inner adaptation (1 and 5 steps), the exact
step-size-zero reduction to plain cloning, and the mixture density against
a brute-force per-mode evaluation.  Failures are report entries, not
exceptions: the caller always gets the full table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .adaptloss import (LossNetConfig, TemporalAdaptLoss, init_temporal_loss,
                        inner_adapt)
from .metalearn import DemoTensors, MetaConfig, bc_loss
from .params import ParameterVector, merge, split
from .policy import PolicyConfig, init_policy_params

FD_EPS = 1e-5
PRIMITIVE_TOL = 1e-4
META_TOL = 1e-3
EXACT_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_err: float

    def line(self) -> str:
        word = "PASS" if self.passed else "FAIL"
        return f"{word} {self.name} max_rel_err={self.max_rel_err:.3e}"


def all_passed(results: list[CheckResult]) -> bool:
    return all(r.passed for r in results)


def report_text(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    n_bad = sum(not r.passed for r in results)
    lines.append(f"{'PASS' if n_bad == 0 else 'FAIL'} total "
                 f"checks={len(results)} failures={n_bad}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# finite differences


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-6)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def _fd_check(f, arrays: list[np.ndarray], eps: float = FD_EPS) -> float:
    """Worst relative error between reverse-mode and central differences.

    ``f`` maps a list of numpy arrays to a scalar Tensor; every array is
    treated as differentiable.
    """
    leaves = [T.parameter(a) for a in arrays]
    grads = T.grad(f(leaves), leaves)
    worst = 0.0
    for which, arr in enumerate(arrays):
        fd = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]

            def at(v):
                pert = [a.copy() for a in arrays]
                pert[which][idx] = v
                return float(f([T.tensor(a) for a in pert]).data)

            fd[idx] = (at(orig + eps) - at(orig - eps)) / (2.0 * eps)
            it.iternext()
        worst = max(worst, _rel_err(grads[which].data, fd))
    return worst


def _away_from(rng, shape, margin=0.2, span=1.0):
    """Values bounded away from zero: keeps kinked ops FD-differentiable."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, margin + span, shape)


def _weighted(rng, out_shape):
    w = rng.normal(size=out_shape)
    return lambda t: T.tsum(T.mul(t, w))


def _primitive_cases(rng) -> list[tuple[str, object, list[np.ndarray]]]:
    """One randomized instance of every differentiable primitive."""
    n = rng.normal
    cases = []

    def case(name, arrays, apply):
        red = _weighted(rng, apply([T.tensor(a) for a in arrays]).shape)
        cases.append((name, lambda ls, ap=apply, r=red: r(ap(ls)), arrays))

    case("add", [n(size=(3, 4)), n(size=(3, 4))], lambda ls: T.add(ls[0], ls[1]))
    case("add_broadcast", [n(size=(3, 4)), n(size=4)], lambda ls: T.add(ls[0], ls[1]))
    case("sub", [n(size=(2, 5)), n(size=(2, 5))], lambda ls: T.sub(ls[0], ls[1]))
    case("mul", [n(size=(4, 3)), n(size=(4, 3))], lambda ls: T.mul(ls[0], ls[1]))
    case("div", [n(size=(3, 3)), _away_from(rng, (3, 3), 0.4)],
         lambda ls: T.div(ls[0], ls[1]))
    case("neg", [n(size=6)], lambda ls: T.neg(ls[0]))
    case("exp", [n(size=(2, 4))], lambda ls: T.exp(ls[0]))
    case("log", [rng.uniform(0.3, 2.0, (3, 3))], lambda ls: T.log(ls[0]))
    case("sqrt", [rng.uniform(0.3, 2.0, (2, 5))], lambda ls: T.sqrt(ls[0]))
    case("relu", [_away_from(rng, (4, 4))], lambda ls: T.relu(ls[0]))
    case("sigmoid", [n(size=(3, 4))], lambda ls: T.sigmoid(ls[0]))
    case("tanh", [n(size=(3, 4))], lambda ls: T.tanh(ls[0]))
    case("clip", [_away_from(rng, (4, 3), 0.2, 2.0)],
         lambda ls: T.clip(ls[0], -1.0, 1.0))
    case("reshape", [n(size=(3, 4))], lambda ls: T.reshape(ls[0], (2, 6)))
    case("transpose", [n(size=(2, 3, 4))], lambda ls: T.transpose(ls[0], (2, 0, 1)))
    case("broadcast_to", [n(size=(1, 4))], lambda ls: T.broadcast_to(ls[0], (3, 4)))
    idx = rng.integers(0, 5, size=7)
    case("getitem", [n(size=(5, 3))], lambda ls: T.getitem(ls[0], idx))
    case("concat", [n(size=(2, 3)), n(size=(4, 3))],
         lambda ls: T.concat(ls, axis=0))
    case("stack", [n(size=(3,)), n(size=(3,))], lambda ls: T.stack(ls, axis=1))
    case("tsum", [n(size=(3, 4, 2))], lambda ls: T.tsum(ls[0], axis=1))
    case("tsum_all", [n(size=(3, 4))], lambda ls: T.tsum(ls[0]))
    case("mean", [n(size=(4, 5))], lambda ls: T.mean(ls[0], axis=0, keepdims=True))
    case("matmul", [n(size=(3, 4)), n(size=(4, 2))],
         lambda ls: T.matmul(ls[0], ls[1]))
    case("l2_norm", [_away_from(rng, (5,), 0.3)], lambda ls: T.l2_norm(ls[0]))
    case("softmax", [n(size=(3, 4))], lambda ls: T.softmax(ls[0], axis=1))
    case("logsumexp", [n(size=(3, 4))], lambda ls: T.logsumexp(ls[0], axis=1))
    case("log_softmax", [n(size=(2, 5))], lambda ls: T.log_softmax(ls[0], axis=1))
    case("layer_norm", [n(size=(3, 6)), rng.uniform(0.5, 1.5, 6), n(size=6)],
         lambda ls: T.layer_norm(ls[0], ls[1], ls[2]))
    case("extract_patches1d", [n(size=(6, 2))],
         lambda ls: T.extract_patches1d(ls[0], 3))
    case("extract_patches2d", [n(size=(1, 5, 5, 2))],
         lambda ls: T.extract_patches2d(ls[0], 3, 2))
    case("conv1d_valid", [n(size=(7, 2)), n(size=(3, 2, 2)), n(size=2)],
         lambda ls: T.conv1d_valid(ls[0], ls[1], ls[2]))
    stride = int(rng.integers(1, 3))
    case("conv2d", [n(size=(5, 5, 2)), n(size=(3, 3, 2, 2))],
         lambda ls: T.conv2d(ls[0], ls[1], stride=stride))
    return cases


def check_primitives(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    """Every primitive, ``trials`` randomized instances each."""
    names = [name for name, _, _ in _primitive_cases(np.random.default_rng(0))]
    worst = dict.fromkeys(names, 0.0)
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for name, f, arrays in _primitive_cases(rng):
            worst[name] = max(worst[name], _fd_check(f, arrays))
    return [CheckResult(f"primitive.{name}", err <= PRIMITIVE_TOL, err)
            for name, err in worst.items()]


# ---------------------------------------------------------------------------
# meta-gradient checks on a tiny but complete model


TINY_POLICY = PolicyConfig(image_hw=8, conv_channels=(2,), conv_strides=(2,),
                           fc_width=8, fc_layers=1, mdn_modes=2, bias_dim=2)
TINY_LOSS_NET = LossNetConfig(channels=(1, 1), kernel=10)


def _tiny_setup(seed: int, t: int = 20):
    rng = np.random.default_rng(seed)
    theta = init_policy_params(TINY_POLICY, rng)
    loss_obj = init_temporal_loss(TINY_POLICY, TINY_LOSS_NET, rng)
    frames = rng.uniform(size=(t, 8, 8, 3))
    demo = DemoTensors(
        frames=T.tensor(rng.uniform(size=(t, 8, 8, 3))),
        states=T.tensor(rng.normal(size=(t, 4)) * 0.1),
        actions=np.concatenate([rng.normal(size=(t, 2)) * 0.3,
                                rng.integers(0, 2, size=(t, 1)).astype(float)],
                               axis=1),
        final_pose=rng.uniform(size=2))
    return theta, loss_obj, frames, demo


def _meta_loss(joint: ParameterVector, frames_arr: np.ndarray,
               demo: DemoTensors, mcfg: MetaConfig) -> T.Tensor:
    parts = split(joint, ["theta", "psi"])
    res = inner_adapt(parts["theta"], TemporalAdaptLoss(parts["psi"], TINY_LOSS_NET),
                      T.tensor(frames_arr), TINY_POLICY,
                      mcfg.inner_step_size, mcfg.inner_steps,
                      mcfg.clip_lo, mcfg.clip_hi, retain_higher_order=True)
    return bc_loss(res.phi, demo, mcfg, TINY_POLICY)


def check_meta_gradient(inner_steps: int, seed: int = 1) -> CheckResult:
    theta, loss_obj, frames, demo = _tiny_setup(seed)
    mcfg = MetaConfig(inner_step_size=0.01, inner_steps=inner_steps,
                      clip_lo=-1e9, clip_hi=1e9, demo_subsample=20)
    joint = merge({"theta": theta, "psi": loss_obj.params})

    def f(pv: ParameterVector) -> float:
        return float(_meta_loss(pv, frames, demo, mcfg).data)

    analytic = T.grad(_meta_loss(joint, frames, demo, mcfg), joint).flatten()
    base = joint.flatten()
    fd = np.zeros_like(base)
    for i in range(base.size):
        vp, vm = base.copy(), base.copy()
        vp[i] += FD_EPS
        vm[i] -= FD_EPS
        fd[i] = (f(joint.unflatten(vp)) - f(joint.unflatten(vm))) / (2 * FD_EPS)
    err = _rel_err(analytic, fd)
    return CheckResult(f"meta_gradient.{inner_steps}_step", err <= META_TOL, err)


def check_alpha_zero(seed: int = 2) -> list[CheckResult]:
    theta, loss_obj, frames, demo = _tiny_setup(seed)
    mcfg = MetaConfig(inner_step_size=0.0, inner_steps=1, demo_subsample=20)
    joint = merge({"theta": theta, "psi": loss_obj.params})
    meta = split(T.grad(_meta_loss(joint, frames, demo, mcfg), joint),
                 ["theta", "psi"])
    plain = T.grad(bc_loss(theta, demo, mcfg, TINY_POLICY), theta)
    dtheta = float(np.max(np.abs(meta["theta"].flatten() - plain.flatten())))
    dpsi = float(np.max(np.abs(meta["psi"].flatten()), initial=0.0))
    return [CheckResult("alpha_zero.theta_matches_bc", dtheta <= EXACT_TOL, dtheta),
            CheckResult("alpha_zero.psi_grad_zero", dpsi == 0.0, dpsi)]


# ---------------------------------------------------------------------------
# mixture density oracle


def _brute_force_nll(logits, means, log_sigmas, action) -> float:
    w = np.exp(logits - logits.max())
    w = w / w.sum()
    sig = np.exp(log_sigmas)
    dens = 0.0
    for m in range(len(w)):
        d = action - means[m]
        dens += w[m] * np.prod(
            np.exp(-0.5 * (d / sig[m]) ** 2) / (sig[m] * np.sqrt(2 * np.pi)))
    return -float(np.log(dens))


def check_mdn_oracle(trials: int = 100, seed: int = 3) -> CheckResult:
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        m = int(rng.integers(1, 21))
        a = int(rng.integers(1, 5))
        logits = rng.normal(size=m)
        means = rng.normal(size=(m, a))
        log_sigmas = rng.normal(size=m) * 0.5
        action = rng.normal(size=a)
        got = float(nn.mdn_nll(nn.MdnParams(T.tensor(logits), T.tensor(means),
                                            T.tensor(log_sigmas)),
                               T.tensor(action)).data)
        want = _brute_force_nll(logits, means, log_sigmas, action)
        worst = max(worst, abs(got - want))
    return CheckResult("mdn_nll.brute_force", worst <= EXACT_TOL, worst)


# ---------------------------------------------------------------------------
# the full suite


def run_all(primitive_trials: int = 100, mdn_trials: int = 100) -> list[CheckResult]:
    results = check_primitives(trials=primitive_trials)
    results.append(check_meta_gradient(1))
    results.append(check_meta_gradient(5))
    results.extend(check_alpha_zero())
    results.append(check_mdn_oracle(trials=mdn_trials))
    return results
