"""Reverse-mode autodiff over float64 numpy arrays.

A computation graph is built per forward pass and discarded after
``backward``. Nodes cache their forward value and accumulate gradients;
named :class:`Parameter` leaves are what ``backward`` reports on. The op
set is deliberately small: exactly what a dilated-convolution sequence
encoder with a linear head and a cross-entropy loss needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_CLAMP = 1e-12


class Parameter:
    """Named, optionally trainable float64 array."""

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.trainable = trainable

    def copy(self) -> "Parameter":
        return Parameter(self.name, self.value.copy(), self.trainable)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


def clone_params(params: dict[str, Parameter]) -> dict[str, Parameter]:
    """Deep-copy a parameter set (values included)."""
    return {name: p.copy() for name, p in params.items()}


class GraphNode:
    """One vertex of the computation graph.

    ``grad`` has the same shape as ``value`` and is (re)zeroed at the start
    of every backward pass, so repeated backward calls on one graph are
    bit-identical.
    """

    __slots__ = ("value", "grad", "parents", "op", "param", "_backward")

    def __init__(self, value, parents=(), op="const", backward=None, param=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.param = param
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"GraphNode(op={self.op!r}, shape={self.value.shape})"


def constant(value) -> GraphNode:
    return GraphNode(value, op="const")


def leaf(param: Parameter) -> GraphNode:
    return GraphNode(param.value, op="param", param=param)


def make_leaves(params: dict[str, Parameter]) -> dict[str, GraphNode]:
    return {name: leaf(p) for name, p in params.items()}


def as_node(x) -> GraphNode:
    if isinstance(x, GraphNode):
        return x
    if isinstance(x, Parameter):
        return leaf(x)
    return constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> GraphNode:
    a, b = as_node(a), as_node(b)
    out = GraphNode(a.value + b.value, (a, b), "add")

    def bk(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad += _unbroadcast(g, b.value.shape)

    out._backward = bk
    return out


def sub(a, b) -> GraphNode:
    a, b = as_node(a), as_node(b)
    out = GraphNode(a.value - b.value, (a, b), "sub")

    def bk(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad -= _unbroadcast(g, b.value.shape)

    out._backward = bk
    return out


def mul(a, b) -> GraphNode:
    a, b = as_node(a), as_node(b)
    out = GraphNode(a.value * b.value, (a, b), "mul")

    def bk(g):
        a.grad += _unbroadcast(g * b.value, a.value.shape)
        b.grad += _unbroadcast(g * a.value, b.value.shape)

    out._backward = bk
    return out


def neg(a) -> GraphNode:
    a = as_node(a)
    out = GraphNode(-a.value, (a,), "neg")

    def bk(g):
        a.grad -= g

    out._backward = bk
    return out


def scale(a, c: float) -> GraphNode:
    a = as_node(a)
    out = GraphNode(a.value * c, (a,), "scale")

    def bk(g):
        a.grad += g * c

    out._backward = bk
    return out


def square(a) -> GraphNode:
    a = as_node(a)
    out = GraphNode(a.value * a.value, (a,), "square")

    def bk(g):
        a.grad += 2.0 * a.value * g

    out._backward = bk
    return out


def ssum(a) -> GraphNode:
    """Sum all entries to a scalar."""
    a = as_node(a)
    out = GraphNode(a.value.sum(), (a,), "ssum")

    def bk(g):
        a.grad += g

    out._backward = bk
    return out


def smean(a) -> GraphNode:
    """Mean of all entries, as a scalar."""
    a = as_node(a)
    n = a.value.size
    out = GraphNode(a.value.mean(), (a,), "smean")

    def bk(g):
        a.grad += g / n

    out._backward = bk
    return out


def matmul(a, b) -> GraphNode:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}"
        )
    out = GraphNode(a.value @ b.value, (a, b), "matmul")

    def bk(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    out._backward = bk
    return out


def unsqueeze(a, axis: int) -> GraphNode:
    a = as_node(a)
    out = GraphNode(np.expand_dims(a.value, axis), (a,), "unsqueeze")

    def bk(g):
        a.grad += np.squeeze(g, axis=axis)

    out._backward = bk
    return out


def relu(a) -> GraphNode:
    a = as_node(a)
    out = GraphNode(np.maximum(a.value, 0.0), (a,), "relu")
    live = a.value > 0.0  # subgradient at 0 is 0

    def bk(g):
        a.grad += g * live

    out._backward = bk
    return out


def sigmoid(a) -> GraphNode:
    a = as_node(a)
    x = a.value
    # branch on sign so neither exp overflows
    val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = GraphNode(val, (a,), "sigmoid")

    def bk(g):
        a.grad += g * val * (1.0 - val)

    out._backward = bk
    return out


def softmax(a) -> GraphNode:
    a = as_node(a)
    if a.value.ndim != 2 or a.value.shape[1] < 1:
        raise ValueError(f"softmax expects a B x C array, got shape {a.value.shape}")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = GraphNode(s, (a,), "softmax")

    def bk(g):
        a.grad += s * (g - (g * s).sum(axis=1, keepdims=True))

    out._backward = bk
    return out


def cross_entropy(probs, labels) -> GraphNode:
    """Mean negative log-likelihood of rows that are already distributions."""
    probs = as_node(probs)
    labels = np.asarray(labels, dtype=np.intp)
    if probs.value.ndim != 2:
        raise ValueError(f"cross_entropy expects B x C probabilities, got {probs.value.shape}")
    n, c = probs.value.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range for {c} classes: {labels}")
    rows = np.arange(n)
    picked = probs.value[rows, labels]
    clamped = np.maximum(picked, LOG_CLAMP)
    out = GraphNode(-np.log(clamped).mean(), (probs,), "cross_entropy")

    def bk(g):
        dp = np.zeros_like(probs.value)
        live = picked >= LOG_CLAMP  # clamp region has zero slope
        dp[rows[live], labels[live]] = -g / (n * clamped[live])
        probs.grad += dp

    out._backward = bk
    return out


def softmax_cross_entropy(logits, labels) -> GraphNode:
    """Fused softmax + mean negative log-likelihood on logits.

    Log-sum-exp keeps the value finite and the gradient (p - onehot) / B
    informative even when the softmax saturates, which the clamped
    probability-space composition cannot do; for unsaturated inputs the
    value equals cross_entropy(softmax(logits), labels).
    """
    logits = as_node(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.value.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects B x C logits, got {logits.value.shape}")
    n, c = logits.value.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range for {c} classes: {labels}")
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    lse = np.log(e.sum(axis=1)) + zmax[:, 0]
    rows = np.arange(n)
    out = GraphNode((lse - z[rows, labels]).mean(), (logits,), "softmax_cross_entropy")
    probs = e / e.sum(axis=1, keepdims=True)

    def bk(g):
        dz = probs.copy()
        dz[rows, labels] -= 1.0
        logits.grad += dz * (g / n)

    out._backward = bk
    return out


def conv1d(x, kernels, dilation: int = 1) -> GraphNode:
    """Dilated 1-D convolution over time, stride 1, same-length zero padding.

    ``x`` is (T, Cin) or (B, T, Cin); ``kernels`` is (Cout, Cin, k) with k
    odd. Output timestep t sees input taps at t + (j - k//2) * dilation,
    with out-of-range reads as zero, so output length equals input length.
    """
    x, kernels = as_node(x), as_node(kernels)
    kv = kernels.value
    if kv.ndim != 3:
        raise ValueError(f"kernels must be (Cout, Cin, k), got shape {kv.shape}")
    cout, cin, k = kv.shape
    if k % 2 == 0:
        raise ValueError(f"kernel width must be odd, got k={k}")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation!r}")
    batched = x.value.ndim == 3
    x3 = x.value if batched else x.value[None]
    if x3.ndim != 3 or x3.shape[2] != cin:
        raise ValueError(
            f"input channels {x.value.shape} do not match kernel Cin={cin}"
        )
    b, t, _ = x3.shape
    pad = (k - 1) * dilation // 2
    xp = np.pad(x3, ((0, 0), (pad, pad), (0, 0)))
    out_val = np.zeros((b, t, cout))
    for j in range(k):
        out_val += xp[:, j * dilation:j * dilation + t, :] @ kv[:, :, j].T
    out = GraphNode(out_val if batched else out_val[0], (x, kernels), "conv1d")

    def bk(g):
        g3 = g if batched else g[None]
        gxp = np.zeros_like(xp)
        for j in range(k):
            sl = xp[:, j * dilation:j * dilation + t, :]
            kernels.grad[:, :, j] += np.tensordot(g3, sl, axes=([0, 1], [0, 1]))
            gxp[:, j * dilation:j * dilation + t, :] += g3 @ kv[:, :, j]
        gx = gxp[:, pad:pad + t, :]
        x.grad += gx if batched else gx[0]

    out._backward = bk
    return out


def dense(x, weights, bias) -> GraphNode:
    """Affine map: out = x @ weights.T + bias, broadcast over the batch."""
    x, weights, bias = as_node(x), as_node(weights), as_node(bias)
    if x.value.ndim != 2 or weights.value.ndim != 2:
        raise ValueError(
            f"dense expects 2-D input and weights, got {x.value.shape} and {weights.value.shape}"
        )
    dout, din = weights.value.shape
    if x.value.shape[1] != din or bias.value.shape != (dout,):
        raise ValueError(
            f"dense shape mismatch: input {x.value.shape}, weights {weights.value.shape}, "
            f"bias {bias.value.shape}"
        )
    out = GraphNode(x.value @ weights.value.T + bias.value, (x, weights, bias), "dense")

    def bk(g):
        x.grad += g @ weights.value
        weights.grad += g.T @ x.value
        bias.grad += g.sum(axis=0)

    out._backward = bk
    return out


def _mask2d(mask, x3_shape) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = m[None]
    if m.shape != x3_shape[:2]:
        raise ValueError(f"mask shape {np.asarray(mask).shape} does not match input {x3_shape}")
    return m


def gap_time(x, mask) -> GraphNode:
    """Per-channel mean over the timesteps whose mask entry is true."""
    x = as_node(x)
    batched = x.value.ndim == 3
    x3 = x.value if batched else x.value[None]
    m = _mask2d(mask, x3.shape)
    counts = m.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("gap_time: mask selects no timesteps for at least one sample")
    mf = m.astype(np.float64)
    out_val = np.einsum("bt,btc->bc", mf, x3) / counts[:, None]
    out = GraphNode(out_val if batched else out_val[0], (x,), "gap_time")

    def bk(g):
        g2 = g if batched else g[None]
        gx = mf[:, :, None] * (g2 / counts[:, None])[:, None, :]
        x.grad += gx if batched else gx[0]

    out._backward = bk
    return out


def mask_time(x, mask) -> GraphNode:
    """Zero every timestep whose mask entry is false (gradient likewise)."""
    x = as_node(x)
    batched = x.value.ndim == 3
    x3 = x.value if batched else x.value[None]
    mf = _mask2d(mask, x3.shape).astype(np.float64)[:, :, None]
    out_val = x3 * mf
    out = GraphNode(out_val if batched else out_val[0], (x,), "mask_time")

    def bk(g):
        g3 = g if batched else g[None]
        gx = g3 * mf
        x.grad += gx if batched else gx[0]

    out._backward = bk
    return out


def avg_pool_channels(x, target: int) -> GraphNode:
    """Pool the channel axis to ``target`` dims by non-overlapping means."""
    x = as_node(x)
    d = x.value.shape[-1]
    if target < 1 or d % target != 0:
        raise ValueError(f"cannot pool {d} channels into {target} equal windows")
    w = d // target
    lead = x.value.shape[:-1]
    out_val = x.value.reshape(*lead, target, w).mean(axis=-1)
    out = GraphNode(out_val, (x,), "avg_pool_channels")

    def bk(g):
        x.grad += np.repeat(g, w, axis=-1) / w

    out._backward = bk
    return out


def pairwise_sqdist(q, p) -> GraphNode:
    """Squared Euclidean distances between rows of q (B x D) and p (C x D)."""
    q, p = as_node(q), as_node(p)
    if q.value.ndim != 2 or p.value.ndim != 2 or q.value.shape[1] != p.value.shape[1]:
        raise ValueError(f"pairwise_sqdist shape mismatch: {q.value.shape} vs {p.value.shape}")
    qv, pv = q.value, p.value
    d2 = (qv * qv).sum(axis=1)[:, None] + (pv * pv).sum(axis=1)[None, :] - 2.0 * (qv @ pv.T)
    out = GraphNode(d2, (q, p), "pairwise_sqdist")

    def bk(g):
        q.grad += 2.0 * (qv * g.sum(axis=1)[:, None] - g @ pv)
        p.grad += 2.0 * (pv * g.sum(axis=0)[:, None] - g.T @ qv)

    out._backward = bk
    return out


def _toposort(root: GraphNode) -> list[GraphNode]:
    order: list[GraphNode] = []
    seen: set[int] = set()
    stack: list[tuple[GraphNode, bool]] = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order  # parents precede children


def backward(loss: GraphNode) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns the gradient for every trainable Parameter reachable from the
    loss, keyed by parameter name. All node gradients are zeroed first, so
    running backward twice on one graph gives bit-identical results.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.value.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = np.zeros_like(node.value)
    loss.grad = loss.grad + 1.0
    grads: dict[str, np.ndarray] = {}
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
        if node.param is not None and node.param.trainable:
            prev = grads.get(node.param.name)
            grads[node.param.name] = node.grad.copy() if prev is None else prev + node.grad
    return grads


@dataclass
class FiniteDiffReport:
    """Outcome of a central-difference gradient check."""

    max_rel_err: float
    rtol: float
    n_checked: int
    passed: bool
    worst: tuple[str, int] | None = None
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst[0]}[{self.worst[1]}]" if self.worst else ""
        return (f"gradcheck {status}: max rel err {self.max_rel_err:.3e}{where} "
                f"(rtol {self.rtol:.0e}, {self.n_checked} coordinates)")


def finite_diff_check(fn, params: dict[str, Parameter], step: float = 1e-5,
                      rtol: float = 1e-4, atol_floor: float = 1e-6,
                      max_coords_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> FiniteDiffReport:
    """Compare backward() gradients with central finite differences.

    ``fn(params)`` must deterministically build and return a scalar loss
    node from the current parameter values. Coordinates where both
    estimates are below ``atol_floor`` count as matching (the central
    difference is pure roundoff noise there).
    """
    grads = backward(fn(params))
    max_err = 0.0
    worst = None
    n_checked = 0
    per_param: dict[str, float] = {}
    for name, p in params.items():
        if not p.trainable:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        size = flat.size
        if max_coords_per_param is not None and size > max_coords_per_param:
            picker = rng if rng is not None else np.random.default_rng(0)
            coords = picker.choice(size, size=max_coords_per_param, replace=False)
        else:
            coords = range(size)
        worst_here = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = float(fn(params).value)
            flat[idx] = orig - step
            f_minus = float(fn(params).value)
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            ad = float(g.reshape(-1)[idx])
            denom = max(abs(ad), abs(fd))
            n_checked += 1
            if denom < atol_floor:
                continue
            rel = abs(ad - fd) / denom
            worst_here = max(worst_here, rel)
            if rel > max_err:
                max_err = rel
                worst = (name, int(idx))
        per_param[name] = worst_here
    return FiniteDiffReport(max_rel_err=max_err, rtol=rtol, n_checked=n_checked,
                            passed=max_err < rtol, worst=worst, per_param=per_param)
