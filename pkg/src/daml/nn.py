"""Network building blocks: spatial feature points, mixture density heads,
gripper cross-entropy, and fan-in initialization.

Sequence variants operate on a whole trajectory at once (leading T axis);
single-step wrappers exist for the per-frame control loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# initialization

def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); the workhorse init."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# spatial soft-argmax

@dataclass
class FeaturePoints:
    """Per-channel expected image coordinates, interleaved as (x, y) pairs.

    x runs -1 (left) to +1 (right), y runs -1 (top) to +1 (bottom); a map
    with a single pixel in a dimension yields coordinate 0 there.
    """
    points: Tensor  # [2*C]


def _coord_grid(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def spatial_soft_argmax_seq(activations: Tensor, temp: float = 1.0) -> Tensor:
    """[T, H, W, C] -> [T, 2*C] of softmax-weighted (x, y) per channel.

    ``temp`` scales attention sharpness.  Normalized activations have O(1)
    range, which leaves the softmax nearly uniform and every keypoint pinned
    to the image center; a temperature well below 1 restores contrast.
    """
    if temp <= 0:
        raise ValueError("softmax temperature must be positive")
    t, h, w, c = activations.shape
    flat = T.reshape(activations, (t, h * w, c))
    if temp != 1.0:
        flat = T.mul(flat, 1.0 / temp)
    p = T.softmax(flat, axis=1)
    xs = np.broadcast_to(_coord_grid(w)[None, :], (h, w)).reshape(h * w, 1)
    ys = np.broadcast_to(_coord_grid(h)[:, None], (h, w)).reshape(h * w, 1)
    ex = T.tsum(T.mul(p, xs), axis=1)  # [T, C]
    ey = T.tsum(T.mul(p, ys), axis=1)
    pairs = T.concat([T.reshape(ex, (t, c, 1)), T.reshape(ey, (t, c, 1))], axis=2)
    return T.reshape(pairs, (t, 2 * c))


def spatial_soft_argmax(activations: Tensor, temp: float = 1.0) -> FeaturePoints:
    """[H, W, C] -> FeaturePoints with 2*C interleaved coordinates."""
    h, w, c = activations.shape
    seq = spatial_soft_argmax_seq(T.reshape(activations, (1, h, w, c)), temp)
    return FeaturePoints(points=T.reshape(seq, (2 * c,)))


# ---------------------------------------------------------------------------
# mixture density head (isotropic Gaussians, parameterized by log sigma)

@dataclass
class MdnParams:
    logits: Tensor      # [M]
    means: Tensor       # [M, A]
    log_sigmas: Tensor  # [M]

    def __post_init__(self):
        m = self.logits.shape[0]
        if self.means.ndim != 2 or self.means.shape[0] != m or self.log_sigmas.shape != (m,):
            raise ValueError("inconsistent mixture shapes")

    @property
    def num_modes(self) -> int:
        return self.logits.shape[0]

    @property
    def action_dim(self) -> int:
        return self.means.shape[1]


def mdn_nll_seq(logits: Tensor, means: Tensor, log_sigmas: Tensor, actions: Tensor) -> Tensor:
    """Per-step negative log density of ``actions`` under the mixtures.

    logits [T, M], means [T, M, A], log_sigmas [T, M], actions [T, A] -> [T].
    """
    t, m = logits.shape
    a = means.shape[2]
    logw = T.log_softmax(logits, axis=1)
    diff = T.sub(T.reshape(actions, (t, 1, a)), means)           # [T, M, A]
    sq = T.tsum(T.mul(diff, diff), axis=2)                       # [T, M]
    inv_var = T.exp(T.mul(log_sigmas, -2.0))
    quad = T.mul(T.mul(sq, inv_var), 0.5)
    log_comp = T.sub(T.add(T.mul(log_sigmas, -float(a)), -0.5 * a * LOG_2PI), quad)
    return T.neg(T.logsumexp(T.add(logw, log_comp), axis=1))


def mdn_nll(params: MdnParams, action: Tensor) -> Tensor:
    """Negative log density of a single action; scalar tensor."""
    m, a = params.means.shape
    seq = mdn_nll_seq(T.reshape(params.logits, (1, m)),
                      T.reshape(params.means, (1, m, a)),
                      T.reshape(params.log_sigmas, (1, m)),
                      T.reshape(action, (1, a)))
    return T.reshape(seq, ())


def mdn_density_oracle(logits: np.ndarray, means: np.ndarray, log_sigmas: np.ndarray,
                       action: np.ndarray) -> float:
    """Brute-force mixture density (no log-sum-exp); test oracle, not a hot path."""
    w = np.exp(logits - logits.max())
    w = w / w.sum()
    a = means.shape[1]
    total = 0.0
    for m in range(means.shape[0]):
        sig = np.exp(log_sigmas[m])
        quad = np.sum((action - means[m]) ** 2) / (2.0 * sig * sig)
        total += w[m] * np.exp(-quad) / ((2.0 * np.pi) ** (a / 2.0) * sig ** a)
    return float(total)


def mdn_select_action(params: MdnParams, rng: np.random.Generator,
                      n_samples: int = 100) -> np.ndarray:
    """Draw ``n_samples`` from the mixture, return the one with highest density.

    Draw order is fixed (component indices, then one normal block), so the
    result is a pure function of the rng state.  Ties resolve to the first
    maximizer.
    """
    logits = params.logits.data
    means = params.means.data
    sigmas = np.exp(params.log_sigmas.data)
    m, a = means.shape
    w = np.exp(logits - logits.max())
    w = w / w.sum()
    comps = rng.choice(m, size=n_samples, p=w)
    eps = rng.standard_normal((n_samples, a))
    samples = means[comps] + sigmas[comps, None] * eps

    # mixture log density at each sample
    diff = samples[:, None, :] - means[None, :, :]             # [N, M, A]
    quad = np.sum(diff * diff, axis=2) / (2.0 * sigmas[None, :] ** 2)
    log_comp = (np.log(w)[None, :] - a * np.log(sigmas)[None, :]
                - 0.5 * a * LOG_2PI - quad)
    mx = log_comp.max(axis=1, keepdims=True)
    log_p = mx[:, 0] + np.log(np.exp(log_comp - mx).sum(axis=1))
    return samples[int(np.argmax(log_p))]


# ---------------------------------------------------------------------------
# gripper head

def gripper_ce_seq(logits: Tensor, labels: Tensor) -> Tensor:
    """Stable binary cross-entropy from logits; [T] -> [T].

    Written as logsumexp(0, z) - z*y rather than the relu/abs decomposition:
    the kinked forms have subgradient mismatches at exactly z = 0, which is
    where a freshly initialized head sits.
    """
    two = T.stack([T.mul(logits, 0.0), logits], axis=1)
    return T.sub(T.logsumexp(two, axis=1), T.mul(logits, labels))


def gripper_ce(logit: Tensor, label: float) -> Tensor:
    out = gripper_ce_seq(T.reshape(logit, (1,)), T.tensor(np.array([float(label)])))
    return T.reshape(out, ())
