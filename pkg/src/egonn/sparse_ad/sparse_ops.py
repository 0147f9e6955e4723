"""Sparse voxel layer primitives with hand-written backward passes."""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import functional as F
from .tape import Var, record
from .tensor import _OFFSET, SparseTensor, pack_keys

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GEM_EPS = 1e-6


def _as_axes(v, n=3) -> tuple[int, ...]:
    return tuple(int(x) for x in v) if np.ndim(v) else (int(v),) * n


def gather_matmul(x: Var, weight: Var, groups, n_out: int) -> Var:
    """``out[o] += x[i] @ weight[k]`` for every ``(k, i, o)`` pair of every group.

    Each group is ``(k, in_rows, out_rows)`` with both row arrays injective,
    so plain fancy-index accumulation is exact.
    """
    xv, wv = F.value(x), F.value(weight)
    out = np.zeros((n_out, wv.shape[2]), dtype=np.result_type(xv, wv))
    for k, i, o in groups:
        out[o] += xv[i] @ wv[k]

    def bw(g):
        gx = np.zeros_like(xv) if isinstance(x, Var) and x.requires_grad else None
        gw = np.zeros_like(wv) if isinstance(weight, Var) and weight.requires_grad else None
        for k, i, o in groups:
            go = g[o]
            if gx is not None:
                gx[i] += go @ wv[k].T
            if gw is not None:
                gw[k] += xv[i].T @ go
        return gx, gw

    return record(out, (x, weight), bw)


def kernel_offsets(kernel_size) -> np.ndarray:
    ks = _as_axes(kernel_size)
    ranges = [range(-(k // 2), k // 2 + 1) if k % 2 else range(0, k) for k in ks]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64).reshape(-1, 3)


def _neighbor_map(x: SparseTensor, kernel_size, theta_wrap: bool):
    key = ("nbr", _as_axes(kernel_size), theta_wrap)
    if key in x.cache:
        return x.cache[key]
    coords = x.coords
    keys = x.keys
    n = len(keys)
    theta = coords[:, 2]
    base = keys - ((theta + _OFFSET) << 16)
    rows = np.arange(n)
    offsets = kernel_offsets(kernel_size)
    dz_lo, dz_hi = int(offsets[:, 2].min()), int(offsets[:, 2].max())
    width = dz_hi - dz_lo + 1
    columns = np.unique(offsets[:, :2], axis=0)
    kidx_parts, in_parts, out_parts = [], [], []
    # z is the lowest packed field, so the z-neighbors of a column are a run
    # of at most ``width`` consecutive keys found with one binary search
    for c, (dr, dt) in enumerate(columns):
        nt = theta + dt
        if theta_wrap:
            nt = np.mod(nt, x.n_theta)
        col = base + (int(dr) << 32) + ((nt + _OFFSET) << 16)
        start = np.searchsorted(keys, col + dz_lo)
        for j in range(width):
            p = start + j
            ok = p < n
            pc = np.where(ok, p, n - 1)
            d = keys[pc] - col
            ok &= d <= dz_hi
            if not ok.any():
                break
            kidx_parts.append((c * width + d[ok] - dz_lo).astype(np.int16))
            in_parts.append(pc[ok])
            out_parts.append(rows[ok])
    groups = []
    if kidx_parts:
        kidx = np.concatenate(kidx_parts)
        order = np.argsort(kidx, kind="stable")
        kidx, ins, outs = kidx[order], np.concatenate(in_parts)[order], np.concatenate(out_parts)[order]
        bounds = np.flatnonzero(np.diff(kidx)) + 1
        # map (column, dz) slots back to the kernel's offset enumeration
        slot_to_k = {}
        for k, (dr, dt, dz) in enumerate(offsets):
            cidx = int(np.flatnonzero((columns == (dr, dt)).all(axis=1))[0])
            slot_to_k[cidx * width + int(dz) - dz_lo] = k
        for a, b in zip(np.r_[0, bounds], np.r_[bounds, len(kidx)]):
            groups.append((slot_to_k[int(kidx[a])], ins[a:b], outs[a:b]))
        groups.sort(key=lambda g: g[0])
    x.cache[key] = groups
    return groups


def _down_map(x: SparseTensor, stride):
    key = ("down", stride)
    if key in x.cache:
        return x.cache[key]
    s = np.array(stride, dtype=np.int64)
    parent = x.coords.copy()
    parent[:, 1:] = np.floor_divide(x.coords[:, 1:], s)
    child = x.coords[:, 1:] - parent[:, 1:] * s
    kidx = (child[:, 0] * s[1] + child[:, 1]) * s[2] + child[:, 2]
    pkeys = pack_keys(parent)
    out_keys, inv = np.unique(pkeys, return_inverse=True)
    rows = np.arange(len(parent))
    groups = []
    for k in range(int(np.prod(s))):
        m = kidx == k
        if m.any():
            groups.append((k, rows[m], inv[m]))
    first = np.zeros(len(out_keys), dtype=np.int64)
    first[inv[::-1]] = rows[::-1]
    result = (parent[first], out_keys, groups)
    x.cache[key] = result
    return result


def sparse_conv(x: SparseTensor, kernel: Var, kernel_size=3, stride=1,
                theta_wrap: bool = True) -> SparseTensor:
    """Sparse convolution.

    Stride 1 keeps the input coordinate set and sums ``W_offset · in[u + offset]``
    over existing neighbors. Stride 2 (per axis) maps each input voxel to its
    parent ``floor(c / 2)`` with a ``2x2x2`` kernel indexed by child position.
    """
    stride = _as_axes(stride)
    if len(x) == 0:
        cout = F.value(kernel).shape[2]
        return SparseTensor(x.coords, Var(np.zeros((0, cout), F.value(kernel).dtype)),
                            x.stride, x.n_theta, x.batch_size)
    if stride == (1, 1, 1) and _as_axes(kernel_size) == (1, 1, 1):
        return x.with_feats(F.matmul(x.feats, F.take(kernel, 0)))
    if stride == (1, 1, 1):
        groups = _neighbor_map(x, kernel_size, theta_wrap)
        out = gather_matmul(x.feats, kernel, groups, len(x))
        return x.with_feats(out)
    if _as_axes(kernel_size) != stride:
        raise ValueError("strided convolution requires kernel size equal to the stride")
    coords, keys, groups = _down_map(x, stride)
    out = gather_matmul(x.feats, kernel, groups, len(coords))
    new_stride = tuple(a * b for a, b in zip(x.stride, stride))
    n_theta = math.ceil(x.n_theta / stride[1])
    t = SparseTensor(coords, out, new_stride, n_theta, x.batch_size)
    t.cache["keys"] = keys
    return t


def sparse_tconv(x: SparseTensor, kernel: Var, target: SparseTensor, stride=2) -> SparseTensor:
    """Transposed stride-2 convolution emitting features exactly on ``target``'s coordinates.

    ``out[u] = x[floor(u / 2)] @ W[u mod 2]``: the adjoint of the strided gather.
    """
    stride = _as_axes(stride)
    cout = F.value(kernel).shape[2]
    if len(target) == 0 or len(x) == 0:
        return target.with_feats(Var(np.zeros((len(target), cout), F.value(kernel).dtype)))
    key = ("up", stride, id(x.cache))
    if key not in target.cache:
        s = np.array(stride, dtype=np.int64)
        parent = target.coords.copy()
        parent[:, 1:] = np.floor_divide(target.coords[:, 1:], s)
        child = target.coords[:, 1:] - parent[:, 1:] * s
        kidx = (child[:, 0] * s[1] + child[:, 1]) * s[2] + child[:, 2]
        src = x.index.lookup(pack_keys(parent))
        rows = np.arange(len(target))
        groups = []
        for k in range(int(np.prod(s))):
            m = (kidx == k) & (src >= 0)
            if m.any():
                groups.append((k, src[m], rows[m]))
        target.cache[key] = groups
    out = gather_matmul(x.feats, kernel, target.cache[key], len(target))
    return target.with_feats(out)


class BatchNormState:
    """Running statistics of a batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batch_norm_feats(x: Var, gamma: Var, beta: Var, state: BatchNormState,
                     training: bool) -> Var:
    xv, gv, bv = F.value(x), F.value(gamma), F.value(beta)
    n = xv.shape[0]
    if training:
        mu = xv.mean(axis=0)
        var = xv.var(axis=0)
        if n > 0:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            m = BN_MOMENTUM
            state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
            state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        mu = state.running_mean.astype(xv.dtype)
        var = state.running_var.astype(xv.dtype)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xv - mu) * inv_std
    out = xhat * gv + bv

    def bw(g):
        gg = (g * xhat).sum(axis=0)
        gb = g.sum(axis=0)
        dxhat = g * gv
        if training:
            gx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            gx = dxhat * inv_std
        return gx, gg, gb

    return record(out, (x, gamma, beta), bw)


def batch_norm(x: SparseTensor, gamma: Var, beta: Var, state: BatchNormState,
               training: bool) -> SparseTensor:
    return x.with_feats(batch_norm_feats(x.feats, gamma, beta, state, training))


def segment_mean(x: SparseTensor, feats: Var | None = None) -> Var:
    """Per-batch-element mean of feature rows, shape ``(B, C)``."""
    feats = x.feats if feats is None else feats
    fv = F.value(feats)
    off = x.batch_offsets
    counts = np.diff(off)
    if np.any(counts == 0):
        raise ValueError("empty batch element: no voxels to pool")
    sums = np.add.reduceat(fv, off[:-1], axis=0)
    out = sums / counts[:, None]

    def bw(g):
        return (np.repeat(g / counts[:, None], counts, axis=0),)

    return record(out, (feats,), bw)


def batch_rows(x: SparseTensor) -> np.ndarray:
    return x.coords[:, 0]


def eca(x: SparseTensor, kernel1d: Var) -> SparseTensor:
    """Efficient channel attention: gate channels by a 1D conv over the pooled descriptor."""
    y = segment_mean(x)
    c = y.shape[1]
    if c < 3:
        raise ValueError("channel attention needs at least 3 channels")
    yv = F.value(y)
    pad = np.zeros((yv.shape[0], 1), dtype=yv.dtype)
    ypad = F.concat([Var(pad), y, Var(pad)], axis=1)
    w = kernel1d
    z = (F.take(w, 0) * F.take(ypad, (slice(None), slice(0, c)))
         + F.take(w, 1) * F.take(ypad, (slice(None), slice(1, c + 1)))
         + F.take(w, 2) * F.take(ypad, (slice(None), slice(2, c + 2))))
    gate = F.sigmoid(z)
    return x.with_feats(F.mul(x.feats, F.take_rows(gate, batch_rows(x))))


def linear(x: SparseTensor, weight: Var, bias: Var | None = None) -> SparseTensor:
    out = F.matmul(x.feats, weight)
    if bias is not None:
        out = F.add(out, bias)
    return x.with_feats(out)


def pointwise_mlp(x: SparseTensor, layers) -> SparseTensor:
    """Per-voxel MLP: ReLU between layers, no activation after the last."""
    for i, (w, b) in enumerate(layers):
        if i:
            x = activation(x, "relu")
        x = linear(x, w, b)
    return x


_ACTIVATIONS = {
    "relu": F.relu,
    "tanh": F.tanh,
    "softplus": F.softplus,
    "sigmoid": F.sigmoid,
    "l2norm_rows": F.l2_normalize_rows,
}


def activation(x: SparseTensor, kind: str) -> SparseTensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return x.with_feats(fn(x.feats))


def gem_pool(x: SparseTensor, p: Var) -> Var:
    """Generalized-mean pooling per batch element: ``(mean f^p)^(1/p)``, ``f`` clamped at 1e-6."""
    if len(x) == 0:
        raise ValueError("cannot pool an empty sparse tensor")
    f = F.clamp_min(x.feats, GEM_EPS)
    m = segment_mean(x, F.power(f, p))
    return F.power(m, F.div(1.0, p))
