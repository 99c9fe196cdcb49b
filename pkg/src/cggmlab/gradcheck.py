"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(fn, params, step=1e-5):
    """Central differences of the scalar ``fn()`` w.r.t. each tensor in ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def analytic_grad(fn, params):
    for p in params:
        p.grad = None
    fn().backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def relative_error(a, b) -> float:
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check(fn, params: list[Tensor], step=1e-5) -> float:
    """Relative error between backward() and finite differences for ``fn``.

    ``fn`` must rebuild the graph from ``params`` on every call and return a
    single-element tensor. The parameter values are restored afterwards.
    """
    return relative_error(analytic_grad(fn, params), numerical_grad(fn, params, step))
