"""Shared oracles for the test suite.

The central-difference gradient here is deliberately dumb: perturb one scalar
at a time and difference the forward values.  It never touches the backward
pass it is used to check.
"""

from __future__ import annotations

import numpy as np

from daml.params import ParameterVector


def fd_grad_array(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued f with respect to array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = float(f(x))
        x[idx] = orig - eps
        fm = float(f(x))
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * eps)
        it.iternext()
    return g


def fd_grad_pv(f, pv: ParameterVector, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued f with respect to a flat view of pv."""
    base = pv.flatten()
    g = np.zeros_like(base)
    for i in range(base.size):
        vp = base.copy()
        vp[i] += eps
        vm = base.copy()
        vm[i] -= eps
        g[i] = (float(f(pv.unflatten(vp))) - float(f(pv.unflatten(vm)))) / (2.0 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-6)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
