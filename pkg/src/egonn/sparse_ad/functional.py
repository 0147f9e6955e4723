"""Dense differentiable primitives on :class:`Var`."""

from __future__ import annotations

import numpy as np

from .tape import Var, record


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Var:
    av, bv = value(a), value(b)
    return record(av + bv, (a, b),
                  lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Var:
    av, bv = value(a), value(b)
    return record(av - bv, (a, b),
                  lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b) -> Var:
    av, bv = value(a), value(b)
    return record(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    av, bv = value(a), value(b)
    out = av / bv
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / bv, av.shape),
                             _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b) -> Var:
    av, bv = value(a), value(b)

    def bw(g):
        ga = g @ bv.T if isinstance(a, Var) and a.requires_grad else None
        gb = av.T @ g if isinstance(b, Var) and b.requires_grad else None
        return ga, gb

    return record(av @ bv, (a, b), bw)


def transpose(a) -> Var:
    return record(value(a).T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Var:
    av = value(a)
    return record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def take(a, index) -> Var:
    """``a[index]`` with scatter-add backward (repeated indices accumulate)."""
    av = value(a)

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None for i in idx)

    def bw(g):
        ga = np.zeros_like(av)
        if basic:
            ga[index] += g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return record(av[index], (a,), bw)


def take_rows(a, rows: np.ndarray) -> Var:
    """Row gather; cheaper backward than :func:`take` for integer row indices."""
    av = value(a)
    rows = np.asarray(rows, dtype=np.int64)

    def bw(g):
        ga = np.zeros_like(av)
        if len(rows) and len(np.unique(rows)) == len(rows):
            ga[rows] = g
        else:
            np.add.at(ga, rows, g)
        return (ga,)

    return record(av[rows], (a,), bw)


def concat(parts, axis: int = 0) -> Var:
    vals = [value(p) for p in parts]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return record(np.concatenate(vals, axis=axis), tuple(parts),
                  lambda g: tuple(np.split(g, sizes, axis=axis)))


def sum(a, axis=None, keepdims=False) -> Var:  # noqa: A001 - mirrors numpy
    av = value(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return record(av.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Var:
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _unary(a, fn, dfn) -> Var:
    av = value(a)
    out = fn(av)
    return record(out, (a,), lambda g: (g * dfn(av, out),))


def exp(a) -> Var:
    return _unary(a, np.exp, lambda x, y: y)


def log(a) -> Var:
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def sqrt(a) -> Var:
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def cos(a) -> Var:
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def sin(a) -> Var:
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def tanh(a) -> Var:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Var:
    return _unary(a, _sigmoid, lambda x, y: y * (1.0 - y))


def softplus(a) -> Var:
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))


def relu(a) -> Var:
    return _unary(a, lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype))


def clamp_min(a, floor: float) -> Var:
    return _unary(a, lambda x: np.maximum(x, floor), lambda x, y: (x > floor).astype(x.dtype))


def power(a, p) -> Var:
    """``a ** p`` for positive ``a``; ``p`` may be a scalar Var (e.g. GeM exponent)."""
    av, pv = value(a), value(p)
    out = av ** pv

    def bw(g):
        ga = g * pv * av ** (pv - 1.0)
        gp = None
        if isinstance(p, Var) and p.requires_grad:
            gp = _unbroadcast(g * out * np.log(av), pv.shape)
        return ga, gp

    return record(out, (a, p), bw)


def norm_rows(a) -> Var:
    """Euclidean norm of each row; the gradient at a zero row is taken as 0."""
    av = value(a)
    n = np.sqrt((av * av).sum(axis=1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        return ((g / safe)[:, None] * av * (n > 0)[:, None],)

    return record(n, (a,), bw)


def l2_normalize_rows(a, eps: float = 1e-12) -> Var:
    av = value(a)
    n = np.maximum(np.sqrt((av * av).sum(axis=1, keepdims=True)), eps)
    out = av / n

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * dot) / n,)

    return record(out, (a,), bw)


def logsumexp(a, axis: int = -1) -> Var:
    """Numerically stable log-sum-exp (max subtracted before exponentiation)."""
    av = value(a)
    m = av.max(axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * e / s,)

    return record(out, (a,), bw)

