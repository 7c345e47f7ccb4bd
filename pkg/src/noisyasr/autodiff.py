"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every :class:`Tensor` records the op that produced it, its parents and a
closure that maps the output gradient to parent gradients. Creation order is
a valid topological order, so :func:`backward` simply walks the reachable
nodes in reverse creation order.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "op", "parents", "_backward", "_id", "requires_grad")

    def __init__(self, value, parents: Sequence["Tensor"] = (), op: str = "leaf",
                 backward: Callable | None = None, requires_grad: bool | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self._id = next(_ids)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        if op != "leaf" and not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"non-finite value produced by {op}")

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def param(value) -> Tensor:
    """A leaf that collects gradients."""
    return Tensor(value, requires_grad=True)


def const(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    # only the trailing-axis bias broadcast the model uses
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_ok(a, b):
    """Equal shapes, or ``b`` is a trailing-axis bias of ``a``."""
    if a.shape == b.shape:
        return True
    return b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if not _broadcast_ok(a, b):
        if _broadcast_ok(b, a):
            a, b = b, a
        else:
            raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        return g, _unbroadcast(g, b.shape)
    return Tensor(a.value + b.value, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same_shape("sub", a, b)
    return Tensor(a.value - b.value, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product (equal shapes, or trailing-axis broadcast of ``b``)."""
    a, b = _lift(a), _lift(b)
    if not _broadcast_ok(a, b):
        if _broadcast_ok(b, a):
            a, b = b, a
        else:
            raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        return g * bv, _unbroadcast(g * av, b.shape)
    return Tensor(av * bv, (a, b), "mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.value * c, (a,), "scale", lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)``; the right operand must be 2-D."""
    a, b = _lift(a), _lift(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ bv.T
        a2 = av.reshape(-1, av.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    return Tensor(av @ bv, (a, b), "matmul", bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_lift(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ValueError(f"concat: shape mismatch {xs[0].shape} vs {x.shape}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))
    return Tensor(np.concatenate([x.value for x in xs], axis=ax), xs, "concat", bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    for x in xs[1:]:
        _check_same_shape("stack", xs[0], x)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))
    return Tensor(np.stack([x.value for x in xs], axis=axis), xs, "stack", bw)


def slice_(a: Tensor, idx) -> Tensor:
    shape = a.shape
    try:
        out = a.value[idx]
    except IndexError as exc:
        raise ValueError(f"slice: index {idx!r} invalid for shape {shape}") from exc

    def bw(g):
        full = np.zeros(shape)
        if _has_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)
    return Tensor(np.array(out, copy=True), (a,), "slice", bw)


def _has_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.value.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor(np.transpose(a.value, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    x = a.value
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return Tensor(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return Tensor(a.value * mask, (a,), "relu", lambda g: (g * mask,))


def hardtanh(a: Tensor, lo: float = 0.0, hi: float = 20.0) -> Tensor:
    """Clamp to [lo, hi]; with lo=0 this is the clipped ReLU of DS2-style front ends."""
    mask = (a.value > lo) & (a.value < hi)
    return Tensor(np.clip(a.value, lo, hi), (a,), "hardtanh", lambda g: (g * mask,))


def logsumexp(x: np.ndarray, axis=-1, keepdims=False) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = a.value - logsumexp(a.value, axis=axis, keepdims=True)
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return Tensor(out, (a,), "log_softmax", bw)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)
    return Tensor(a.value.sum(axis=axis), (a,), "reduce_sum", bw)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def pick(a: Tensor, labels) -> Tensor:
    """``a[i, labels[i]]`` for a 2-D tensor; the cross-entropy gather."""
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise ValueError(f"pick: shape mismatch {a.shape} vs labels {labels.shape}")
    rows = np.arange(a.shape[0])
    return slice_(a, (rows, labels))


def grad_reverse(x: Tensor, coef: float = 1.0) -> Tensor:
    """Identity forward; the backward pass multiplies the gradient by ``-coef``."""
    if coef <= 0:
        raise ValueError(f"gradient reversal coefficient must be positive, got {coef}")
    c = float(coef)
    return Tensor(x.value, (x,), "grad_reverse", lambda g: (-c * g,))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=(1, 1)) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    x: (B, C_in, H, W), w: (C_out, C_in, kh, kw), b: (C_out,) ->
    (B, C_out, (H-kh)//sh + 1, (W-kw)//sw + 1).
    """
    B, C, H, W = x.shape
    co, ci, kh, kw = w.shape
    sh, sw = stride
    if ci != C:
        raise ValueError(f"conv2d: shape mismatch input {x.shape} vs weight {w.shape}")
    if H < kh or W < kw:
        raise ValueError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.value, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # win: (B, C, Ho, Wo, kh, kw)
    out = np.einsum("bchwij,ocij->bohw", win, w.value, optimize=True) + b.value[:, None, None]
    wv = w.value

    def bw(g):
        gw = np.einsum("bohw,bchwij->ocij", g, win, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gx = np.zeros(x.shape)
        # scatter each kernel tap back onto the strided input grid
        contrib = np.einsum("bohw,ocij->bchwij", g, wv, optimize=True)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += contrib[..., i, j]
        return gx, gw, gb
    return Tensor(out, (x, w, b), "conv2d", bw)


def backward(root: Tensor) -> list[Tensor]:
    """Populate ``.grad`` of every node reachable from the scalar ``root``.

    Gradients accumulate into existing ``.grad`` arrays, so callers zero leaves
    between steps. Returns the visited nodes in reverse topological order.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    seen, order, stack_ = set(), [], [root]
    while stack_:
        n = stack_.pop()
        if n._id in seen or not n.requires_grad:
            continue
        seen.add(n._id)
        order.append(n)
        stack_.extend(n.parents)
    order.sort(key=lambda n: n._id, reverse=True)
    # intermediate grads are scratch; leaves keep what they already hold
    for n in order:
        if n.parents:
            n.grad = None
    root._accumulate(np.ones(root.shape))
    for n in order:
        if n._backward is None or n.grad is None:
            continue
        grads = n._backward(n.grad)
        for p, g in zip(n.parents, grads):
            if p.requires_grad and g is not None:
                p._accumulate(g)
    return order


def finite_diff_check(f: Callable[[np.ndarray], float], p0: np.ndarray,
                      analytic: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and a central difference of ``f`` at ``p0``.

    Per coordinate: |a - n| / max(1e-8, |a| + |n|).
    """
    if h <= 0:
        raise ValueError("step must be positive")
    p = np.array(p0, dtype=np.float64, copy=True).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.empty_like(p)
    for i in range(p.size):
        old = p[i]
        p[i] = old + h
        fp = f(p.copy())
        p[i] = old - h
        fm = f(p.copy())
        p[i] = old
        numeric[i] = (fp - fm) / (2 * h)
    if p.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max())


def check_gradients(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-5) -> float:
    """Finite-difference check of every entry of ``params`` for the graph ``build_loss``."""
    for p in params:
        p.zero_grad()
    backward(build_loss())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy() if p.grad is not None else np.zeros(p.shape)
        base = p.value.copy()

        def f(flat, p=p, base=base):
            p.value = flat.reshape(base.shape)
            try:
                return float(build_loss().value)
            finally:
                p.value = base
        worst = max(worst, finite_diff_check(f, base, analytic, h))
    return worst


def _sig(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm(x: Tensor, w: Tensor, u: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """One LSTM direction over a batch, as a single node.

    x: (B, T, D); w: (D, 4H) input weights; u: (H, 4H) recurrent weights;
    b: (4H,). Gate order i, f, g, o; zero initial state. With ``reverse`` the
    sequence is read from the last frame to the first, and output frame t is
    still aligned with input frame t. Returns hidden states (B, T, H).
    """
    B, T, D = x.shape
    H = u.shape[0]
    if w.shape != (D, 4 * H) or u.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ValueError(
            f"lstm: shape mismatch x {x.shape}, w {w.shape}, u {u.shape}, b {b.shape}")
    steps = range(T - 1, -1, -1) if reverse else range(T)
    xv, wv, uv = x.value, w.value, u.value
    xp = xv @ wv + b.value
    gates = np.empty((B, T, 4 * H))
    cells = np.empty((B, T, H))
    tanh_c = np.empty((B, T, H))
    hs = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in steps:
        z = xp[:, t] + h @ uv
        ifo = _sig(z[:, [*range(0, 2 * H), *range(3 * H, 4 * H)]])
        i, f, o = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
        g = np.tanh(z[:, 2 * H:3 * H])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[:, t, :H], gates[:, t, H:2 * H], gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:] = i, f, g, o
        cells[:, t], tanh_c[:, t], hs[:, t] = c, tc, h

    def bw(dH):
        dz_all = np.empty((B, T, 4 * H))
        du = np.zeros_like(uv)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        order = list(steps)
        for k in range(T - 1, -1, -1):
            t = order[k]
            prev = order[k - 1] if k > 0 else None
            i, f = gates[:, t, :H], gates[:, t, H:2 * H]
            g, o = gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:]
            tc = tanh_c[:, t]
            c_prev = cells[:, prev] if prev is not None else 0.0
            dh = dH[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            if prev is not None:
                du += hs[:, prev].T @ dz
            dh_next = dz @ uv.T
        dx = dz_all @ wv.T
        dw = xv.reshape(-1, D).T @ dz_all.reshape(-1, 4 * H)
        db = dz_all.sum(axis=(0, 1))
        return dx, dw, du, db
    return Tensor(hs, (x, w, u, b), "lstm", bw)
