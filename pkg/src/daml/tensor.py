"""Reverse-mode automatic differentiation on dense float64 arrays.

Every backward rule is written in terms of the same primitives it
differentiates, so the gradient of a tracked computation is itself a tracked
computation.  That is what lets an optimizer differentiate through a gradient
step (grad-of-grad) without any special casing: call ``grad`` with
``retain_higher_order=True`` and the returned gradients carry their own graph.

All arrays are float64.  There is no broadcasting magic beyond numpy's: the
binary primitives accept mismatched shapes and sum gradient contributions back
over the broadcast axes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    ``grad_tracked`` marks tensors that participate in differentiation; ops
    produce a tracked output iff any input is tracked and graph construction
    is enabled.  Leaves created with ``parameter`` are tracked, leaves created
    with ``tensor`` are not.
    """

    __slots__ = ("data", "grad_tracked", "_parents", "_vjp")

    def __init__(self, data, *, grad_tracked: bool = False, _parents=(), _vjp=None):
        self.data = _arr(data)
        self.grad_tracked = grad_tracked
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp: Callable | None = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", tracked" if self.grad_tracked else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data!r}"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        if p == 2:
            return mul(self, self)
        raise NotImplementedError("only squaring is supported; use exp/log/sqrt")

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(x) -> Tensor:
    """Untracked leaf (a constant as far as differentiation is concerned)."""
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x) -> Tensor:
    """Tracked leaf: gradients can be requested with respect to it."""
    return Tensor(x.data if isinstance(x, Tensor) else x, grad_tracked=True)


def _node(data, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _grad_enabled and any(p.grad_tracked for p in parents):
        return Tensor(data, grad_tracked=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = tsum(g, axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = tensor(a)
        c = _arr(b)
        return _node(a.data + c, (a,), lambda g: (_unbroadcast(g, a.shape),))
    if not isinstance(a, Tensor):
        return add(b, a)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = tensor(a)
        c = _arr(b)
        return _node(a.data - c, (a,), lambda g: (_unbroadcast(g, a.shape),))
    if not isinstance(a, Tensor):
        c = _arr(a)
        return _node(c - b.data, (b,), lambda g: (_unbroadcast(neg(g), b.shape),))
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = tensor(a)
        c = _arr(b)
        return _node(a.data * c, (a,), lambda g: (_unbroadcast(mul(g, c), a.shape),))
    if not isinstance(a, Tensor):
        return mul(b, a)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / _arr(b))
    if not isinstance(a, Tensor):
        c = _arr(a)
        out = c / b.data
        return _node(out, (b,), lambda g: (_unbroadcast(neg(div(mul(g, c), mul(b, b))), b.shape),))
    return _node(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(div(g, b), a.shape),
                            _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)))


def neg(a) -> Tensor:
    a = tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def exp(a) -> Tensor:
    a = tensor(a)
    holder: list[Tensor] = []
    node = _node(np.exp(a.data), (a,), lambda g: (mul(g, holder[0]),))
    holder.append(node)
    return node


def log(a) -> Tensor:
    a = tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    a = tensor(a)
    holder: list[Tensor] = []
    node = _node(np.sqrt(a.data), (a,), lambda g: (div(g, mul(holder[0], 2.0)),))
    holder.append(node)
    return node


def relu(a) -> Tensor:
    a = tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _node(a.data * mask, (a,), lambda g: (mul(g, mask),))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    # stable: exp of a non-positive argument only
    pos = a.data >= 0
    z = np.exp(np.where(pos, -a.data, a.data))
    out = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    holder: list[Tensor] = []
    node = _node(out, (a,), lambda g: (mul(g, mul(holder[0], sub(1.0, holder[0]))),))
    holder.append(node)
    return node


def tanh(a) -> Tensor:
    a = tensor(a)
    holder: list[Tensor] = []
    node = _node(np.tanh(a.data), (a,),
                 lambda g: (mul(g, sub(1.0, mul(holder[0], holder[0]))),))
    holder.append(node)
    return node


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 strictly inside the range, 0 outside.

    The boundary itself passes no gradient, which makes clipped components
    behave as constants under further differentiation (straight-through).
    """
    a = tensor(a)
    mask = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),))


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape) -> Tensor:
    a = tensor(a)
    shape = tuple(shape)
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = tensor(a)
    shape = tuple(shape)
    return _node(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, idx) -> Tensor:
    a = tensor(a)
    return _node(a.data[idx].copy() if isinstance(a.data[idx], np.ndarray) else a.data[idx],
                 (a,), lambda g: (scatter(g, a.shape, idx),))


def scatter(g, shape, idx) -> Tensor:
    """Scatter-add ``g`` into a zero tensor of ``shape`` at ``idx``.

    Accumulation (np.add.at), not assignment: the adjoint of a gather must
    sum the contributions of repeated indices.
    """
    g = tensor(g)
    shape = tuple(shape)

    def _forward(arr):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, idx, arr)
        return out

    return _node(_forward(g.data), (g,), lambda gg: (getitem(gg, idx),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    nd = parts[0].ndim

    def vjp(g):
        outs = []
        for k in range(len(parts)):
            sl = [slice(None)] * nd
            sl[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            outs.append(getitem(g, tuple(sl)))
        return tuple(outs)

    return _node(data, tuple(parts), vjp)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# reductions and linear algebra

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            gg = reshape(g, (1,) * len(in_shape)) if in_shape else g
            return (broadcast_to(gg, in_shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(in_shape) for ax in axes)
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
            g = reshape(g, kshape)
        return (broadcast_to(g, in_shape),)

    return _node(data, (a,), vjp)


# spec name
def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    return tsum(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return div(tsum(a, axis=axis, keepdims=keepdims), float(n))


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def l2_norm(a) -> Tensor:
    """Euclidean norm over all elements; the gradient at the zero tensor is 0."""
    a = tensor(a)
    val = float(np.sqrt(np.sum(a.data * a.data)))
    holder: list[Tensor] = []

    def vjp(g):
        if val == 0.0:
            return (None,)
        return (mul(g, div(a, holder[0])),)

    node = _node(val, (a,), vjp)
    holder.append(node)
    return node


# ---------------------------------------------------------------------------
# softmax family (max-shifted for stability; the shift is a constant, which
# leaves every derivative exact)

def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = exp(sub(a, m))
    return div(e, tsum(e, axis=axis, keepdims=True))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = log(tsum(exp(sub(a, m)), axis=axis, keepdims=True))
    out = add(s, m)
    if not keepdims:
        squeezed = tuple(d for i, d in enumerate(out.shape) if i != axis % out.ndim)
        out = reshape(out, squeezed)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def layer_norm(x, gain, offset, axes=(-1,), eps: float = 1e-6) -> Tensor:
    """Normalize over ``axes`` to zero mean / unit variance, then scale + shift.

    Pure function of its input (no running statistics), so it behaves the
    same inside an adaptation step as outside one.
    """
    x = tensor(x)
    axes = tuple(ax % x.ndim for ax in (axes if isinstance(axes, (tuple, list)) else (axes,)))
    mu = mean(x, axis=axes, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=axes, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), offset)


# ---------------------------------------------------------------------------
# patch extraction (the linear half of convolution; its adjoint is fold, and
# fold's adjoint is extraction again, so every order of derivative exists)

def extract_patches1d(x, k: int) -> Tensor:
    """[T, C] -> [T-k+1, k, C] sliding windows (valid, stride 1)."""
    x = tensor(x)
    t, c = x.shape
    if t < k:
        raise ValueError(f"sequence length {t} shorter than kernel {k}")
    ln = t - k + 1
    data = np.stack([x.data[j:j + ln] for j in range(k)], axis=1)
    return _node(data, (x,), lambda g: (fold_patches1d(g, t, k),))


def fold_patches1d(g, t: int, k: int) -> Tensor:
    """Adjoint of extract_patches1d: scatter-add windows back to [T, C]."""
    g = tensor(g)

    def _forward(arr):
        ln = arr.shape[0]
        out = np.zeros((t, arr.shape[2]), dtype=np.float64)
        for j in range(k):
            out[j:j + ln] += arr[:, j, :]
        return out

    return _node(_forward(g.data), (g,), lambda gg: (extract_patches1d(gg, k),))


def extract_patches2d(x, k: int, stride: int) -> Tensor:
    """[N, H, W, C] -> [N, OH, OW, k, k, C] sliding windows (valid)."""
    x = tensor(x)
    n, h, w, c = x.shape
    if h < k or w < k:
        raise ValueError(f"spatial size ({h},{w}) smaller than kernel {k}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    data = _extract2d_array(x.data, k, stride, oh, ow)
    return _node(data, (x,), lambda g: (fold_patches2d(g, (h, w), k, stride),))


def _extract2d_array(arr: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, h, w, c = arr.shape
    sn, sh, sw, sc = arr.strides
    view = np.lib.stride_tricks.as_strided(
        arr, shape=(n, oh, ow, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    return np.ascontiguousarray(view)


def fold_patches2d(g, hw: tuple[int, int], k: int, stride: int) -> Tensor:
    """Adjoint of extract_patches2d: scatter-add windows back to [N, H, W, C]."""
    g = tensor(g)
    h, w = hw

    def _forward(arr):
        return fold_patches2d_array(arr, (h, w), k, stride)

    return _node(_forward(g.data), (g,), lambda gg: (extract_patches2d(gg, k, stride),))


def fold_patches2d_array(arr: np.ndarray, hw: tuple[int, int], k: int, stride: int) -> np.ndarray:
    # module-level on purpose: the gradient-check fault-injection fixture
    # swaps this out to prove the conv check catches a broken backward
    h, w = hw
    n, oh, ow, _, _, c = arr.shape
    out = np.zeros((n, h, w, c), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            out[:, ki:ki + stride * (oh - 1) + 1:stride,
                kj:kj + stride * (ow - 1) + 1:stride] += arr[:, :, :, ki, kj]
    return out


# ---------------------------------------------------------------------------
# convolution

def conv1d_valid(x, kernels, bias) -> Tensor:
    """Temporal convolution, valid padding, stride 1.

    x: [T, C_in], kernels: [K, C_in, C_out], bias: [C_out] -> [T-K+1, C_out]
    with out[t, o] = bias[o] + sum_{j,i} kernels[j, i, o] * x[t + j, i].
    """
    x, kernels, bias = tensor(x), tensor(kernels), tensor(bias)
    k, ci, co = kernels.shape
    if x.ndim != 2 or x.shape[1] != ci:
        raise ValueError(f"conv1d_valid: input {x.shape} vs kernels {kernels.shape}")
    if bias.shape != (co,):
        raise ValueError(f"conv1d_valid: bias {bias.shape} vs C_out {co}")
    patches = extract_patches1d(x, k)                     # [L, K, C_in]
    flat = reshape(patches, (patches.shape[0], k * ci))   # row-major: j major, i minor
    return add(matmul(flat, reshape(kernels, (k * ci, co))), bias)


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """Spatial cross-correlation, valid padding, square kernel, no bias.

    x: [H, W, C_in] or [N, H, W, C_in]; kernels: [K, K, C_in, C_out].
    """
    x, kernels = tensor(x), tensor(kernels)
    k, k2, ci, co = kernels.shape
    if k != k2:
        raise ValueError("conv2d expects a square kernel")
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[3] != ci:
        raise ValueError(f"conv2d: input {x.shape} vs kernels {kernels.shape}")
    n, h, w, _ = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    patches = extract_patches2d(x, k, stride)             # [N, OH, OW, K, K, C_in]
    flat = reshape(patches, (n * oh * ow, k * k * ci))
    out = reshape(matmul(flat, reshape(kernels, (k * k * ci, co))), (n, oh, ow, co))
    if single:
        out = reshape(out, (oh, ow, co))
    return out


# ---------------------------------------------------------------------------
# differentiation

def grad(output: Tensor, inputs, retain_higher_order: bool = False):
    """Reverse-mode gradients of a scalar ``output`` w.r.t. ``inputs``.

    ``inputs`` may be a ParameterVector (returns a ParameterVector) or a
    sequence of tensors (returns a list).  An input that the output does not
    depend on gets a zero gradient rather than an error.  With
    ``retain_higher_order`` the returned gradients are themselves tracked
    computations and can be differentiated again.
    """
    from .params import ParameterVector

    if output.size != 1:
        raise ValueError(f"grad expects a scalar output, got shape {output.shape}")

    as_pv = isinstance(inputs, ParameterVector)
    targets = list(inputs.tensors()) if as_pv else list(inputs)

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited or not node.grad_tracked:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.grad_tracked and id(p) not in visited:
                stack.append((p, False))

    target_ids = {id(t) for t in targets}
    grads: dict[int, Tensor] = {id(output): tensor(np.ones_like(output.data))}
    ctx = contextlib.nullcontext() if retain_higher_order else no_grad()
    with ctx:
        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None:
                continue
            if id(node) not in target_ids:
                del grads[id(node)]
            if node._vjp is None:
                continue
            contribs = node._vjp(g)
            for p, c in zip(node._parents, contribs):
                if c is None or not p.grad_tracked:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = c if prev is None else add(prev, c)

    out = []
    for t in targets:
        g = grads.get(id(t))
        out.append(g if g is not None else tensor(np.zeros_like(t.data)))
    if as_pv:
        return inputs.replace_tensors(out)
    return out
