"""Shared test utilities, independent of the code paths they check."""
from __future__ import annotations

import numpy as np


def central_diff(scalar_fn, params, step=1e-5):
    """Central-difference gradients of scalar_fn w.r.t. every parameter value.

    Kept separate from metaskill.diffcore.finite_diff_check on purpose: this
    is the oracle the library's own checker is validated against.
    """
    grads = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = scalar_fn()
            flat[i] = orig - step
            down = scalar_fn()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * step)
        grads[name] = g.reshape(p.value.shape)
    return grads


def conv1d_reference(x, kernels, dilation):
    """Direct-summation dilated convolution over explicit padded indices."""
    x = np.asarray(x, dtype=float)
    kernels = np.asarray(kernels, dtype=float)
    t_len, cin = x.shape
    cout, cin_k, k = kernels.shape
    assert cin == cin_k
    out = np.zeros((t_len, cout))
    for t in range(t_len):
        for co in range(cout):
            acc = 0.0
            for ci in range(cin):
                for j in range(k):
                    src = t + (j - k // 2) * dilation
                    if 0 <= src < t_len:
                        acc += kernels[co, ci, j] * x[src, ci]
            out[t, co] = acc
    return out


def max_rel_err(a, b, floor=1e-6):
    """Worst relative disagreement between two gradient pytrees."""
    worst = 0.0
    for name in a:
        av = np.asarray(a[name]).reshape(-1)
        bv = np.asarray(b[name]).reshape(-1)
        denom = np.maximum(np.maximum(np.abs(av), np.abs(bv)), floor)
        rel = np.abs(av - bv) / denom
        live = np.maximum(np.abs(av), np.abs(bv)) >= floor
        if live.any():
            worst = max(worst, float(rel[live].max()))
    return worst
