"""Finite-difference checks of every differentiable primitive, loss and the full network."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .geometry import PoseSE3
from .losses import (TripletIndex, batch_triplet_loss, chamfer_prob_loss, correspondence_matrix,
                     descriptor_loss, p2p_loss, total_local_loss, transform_var)
from .model import EgoNN, NetConfig, SupervoxelGrid, decode_keypoints_var
from .sparse_ad import functional as F
from .sparse_ad import sparse_ops as S
from .sparse_ad.gradcheck import grad_check_report
from .sparse_ad.tape import Parameter, Var
from .sparse_ad.tensor import SparseTensor

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3

Check = tuple[str, Callable[[], Var], list, float]


def _p(rng, shape, name, scale=1.0, offset=0.0, away_from_zero=False):
    v = offset + scale * rng.standard_normal(shape)
    if away_from_zero:
        v = np.where(np.abs(v) < 0.05, 0.3, v)
    return Parameter(v, name)


def _weighted(out: Var, rng) -> Callable[[Var], Var]:
    w = rng.standard_normal(out.shape)
    return lambda o: F.sum(F.mul(o, w))


def _unary_check(name, fn, rng, offset=0.0, kink=False) -> Check:
    a = _p(rng, (5, 4), "a", offset=offset, away_from_zero=kink)
    head = _weighted(fn(a), rng)
    return name, lambda: head(fn(a)), [a], PRIMITIVE_TOL


def _sparse_input(rng, n=40, channels=4, n_theta=8):
    cells = np.array([(b, r, t, z) for b in range(2) for r in range(5) for t in range(n_theta)
                      for z in range(4)])
    pick = cells[rng.choice(len(cells), size=n, replace=False)]
    x = SparseTensor.from_coords(pick, rng.standard_normal((n, channels)), n_theta=n_theta,
                                 batch_size=2)
    return x, Parameter(x.feats.value.copy(), "x")


def dense_checks(rng) -> list[Check]:
    checks = [
        _unary_check("exp", F.exp, rng),
        _unary_check("log", F.log, rng, offset=4.0),
        _unary_check("sqrt", F.sqrt, rng, offset=4.0),
        _unary_check("cos", F.cos, rng),
        _unary_check("sin", F.sin, rng),
        _unary_check("tanh", F.tanh, rng),
        _unary_check("sigmoid", F.sigmoid, rng),
        _unary_check("softplus", F.softplus, rng),
        _unary_check("relu", F.relu, rng, kink=True),
        _unary_check("clamp_min", lambda v: F.clamp_min(v, 0.0), rng, kink=True),
        _unary_check("norm_rows", F.norm_rows, rng),
        _unary_check("l2_normalize_rows", F.l2_normalize_rows, rng),
        _unary_check("logsumexp", lambda v: F.logsumexp(F.mul(v, 3.0), axis=1), rng),
        _unary_check("transpose_reshape", lambda v: F.reshape(F.transpose(v), (2, 10)), rng),
        _unary_check("take", lambda v: F.take(v, (np.array([0, 0, 3]), np.array([1, 1, 2]))), rng),
        _unary_check("take_rows", lambda v: F.take_rows(v, np.array([4, 0, 4, 2])), rng),
        _unary_check("sum_mean", lambda v: F.add(F.sum(v, axis=0), F.mean(v, axis=0)), rng),
    ]
    a = _p(rng, (4, 3), "a")
    b = _p(rng, (3,), "b", offset=2.0)
    m = _p(rng, (3, 5), "m")
    for name, fn in [("add", F.add), ("sub", F.sub), ("mul", F.mul), ("div", F.div)]:
        head = _weighted(fn(a, b), rng)
        checks.append((name, (lambda fn=fn, head=head: head(fn(a, b))), [a, b], PRIMITIVE_TOL))
    head = _weighted(F.matmul(a, m), rng)
    checks.append(("matmul", lambda: head(F.matmul(a, m)), [a, m], PRIMITIVE_TOL))
    head_c = _weighted(F.concat([a, F.mul(a, 2.0)], axis=1), rng)
    checks.append(("concat", lambda: head_c(F.concat([a, F.mul(a, 2.0)], axis=1)), [a], PRIMITIVE_TOL))
    base = Parameter(np.abs(rng.standard_normal((4, 3))) + 0.5, "base")
    p = Parameter(np.array([2.5]), "p")
    head_p = _weighted(F.power(base, p), rng)
    checks.append(("power", lambda: head_p(F.power(base, p)), [base, p], PRIMITIVE_TOL))
    return checks


def sparse_checks(rng) -> list[Check]:
    checks = []
    x, xf = _sparse_input(rng)
    for ks in (3, 5):
        k = _p(rng, (ks ** 3, 4, 3), f"k{ks}", 0.3)
        head = _weighted(S.sparse_conv(x.with_feats(xf), k, ks).feats, rng)
        checks.append((f"sparse_conv_{ks}x{ks}x{ks}",
                       (lambda k=k, ks=ks, head=head: head(S.sparse_conv(x.with_feats(xf), k, ks).feats)),
                       [xf, k], PRIMITIVE_TOL))
    k1 = _p(rng, (1, 4, 3), "k1")
    head1 = _weighted(S.sparse_conv(x.with_feats(xf), k1, 1).feats, rng)
    checks.append(("sparse_conv_1x1x1", lambda: head1(S.sparse_conv(x.with_feats(xf), k1, 1).feats),
                   [xf, k1], PRIMITIVE_TOL))
    kd = _p(rng, (8, 4, 3), "kd", 0.3)
    down = S.sparse_conv(x.with_feats(xf), kd, 2, 2)
    headd = _weighted(down.feats, rng)
    checks.append(("sparse_conv_stride2", lambda: headd(S.sparse_conv(x.with_feats(xf), kd, 2, 2).feats),
                   [xf, kd], PRIMITIVE_TOL))
    ku = _p(rng, (8, 3, 2), "ku", 0.3)
    low = Parameter(rng.standard_normal((len(down), 3)), "low")
    headu = _weighted(S.sparse_tconv(down.with_feats(low), ku, x).feats, rng)
    checks.append(("sparse_tconv", lambda: headu(S.sparse_tconv(down.with_feats(low), ku, x).feats),
                   [low, ku], PRIMITIVE_TOL))
    gamma = Parameter(1 + 0.1 * rng.standard_normal(4), "gamma")
    beta = Parameter(0.1 * rng.standard_normal(4), "beta")
    for training in (True, False):
        state = S.BatchNormState(4, np.float64)
        state.running_mean[:] = rng.standard_normal(4)
        state.running_var[:] = 0.5 + rng.random(4)
        snap = (state.running_mean.copy(), state.running_var.copy())

        def bn(state=state, training=training, snap=snap):
            state.running_mean[:], state.running_var[:] = snap
            return S.batch_norm(x.with_feats(xf), gamma, beta, state, training).feats
        headb = _weighted(bn(), rng)
        checks.append((f"batch_norm_{'train' if training else 'eval'}",
                       (lambda bn=bn, headb=headb: headb(bn())), [xf, gamma, beta], PRIMITIVE_TOL))
    ek = _p(rng, (3,), "eca", 0.5)
    heade = _weighted(S.eca(x.with_feats(xf), ek).feats, rng)
    checks.append(("eca", lambda: heade(S.eca(x.with_feats(xf), ek).feats), [xf, ek], PRIMITIVE_TOL))
    headm = _weighted(S.segment_mean(x.with_feats(xf)), rng)
    checks.append(("segment_mean", lambda: headm(S.segment_mean(x.with_feats(xf))), [xf], PRIMITIVE_TOL))
    pos = Parameter(np.abs(xf.value) + 0.2, "pos")
    gp = Parameter(np.array([3.0]), "gem_p")
    headg = _weighted(S.gem_pool(x.with_feats(pos), gp), rng)
    checks.append(("gem_pool", lambda: headg(S.gem_pool(x.with_feats(pos), gp)), [pos, gp], PRIMITIVE_TOL))
    w0, b0 = _p(rng, (4, 6), "w0"), _p(rng, (6,), "b0")
    w1, b1 = _p(rng, (6, 2), "w1"), _p(rng, (2,), "b1")

    def mlp():
        return S.pointwise_mlp(x.with_feats(xf), [(w0, b0), (w1, b1)]).feats
    headp = _weighted(mlp(), rng)
    checks.append(("pointwise_mlp", lambda: headp(mlp()), [xf, w0, b0, w1, b1], PRIMITIVE_TOL))
    raw = Parameter(np.tanh(rng.standard_normal((6, 3))), "raw")
    grid = SupervoxelGrid()
    centers = grid.centers(rng.integers(0, 8, (6, 3)))
    headk = _weighted(decode_keypoints_var(raw, grid, centers), rng)
    checks.append(("decode_keypoints", lambda: headk(decode_keypoints_var(raw, grid, centers)),
                   [raw], PRIMITIVE_TOL))
    return checks


def loss_checks(rng) -> list[Check]:
    checks = []
    emb = _p(rng, (6, 5), "emb")
    trip = [TripletIndex(0, 1, 2), TripletIndex(3, 4, 5), TripletIndex(1, 0, 5)]
    # margin large enough that every hinge is active and away from its kink
    checks.append(("triplet_loss", lambda: batch_triplet_loss(emb, trip, 5.0), [emb], PRIMITIVE_TOL))
    qa = _p(rng, (7, 3), "qa", 3.0)
    qb = _p(rng, (5, 3), "qb", 3.0)
    sa = Parameter(0.5 + rng.random(7), "sa")
    sb = Parameter(0.5 + rng.random(5), "sb")
    T = PoseSE3.from_yaw(0.3, (0.5, -0.2, 0.1))
    checks.append(("chamfer_prob_loss",
                   lambda: chamfer_prob_loss(qa, transform_var(qb, T), sa, sb), [qa, qb, sa, sb],
                   PRIMITIVE_TOL))
    cloud = rng.standard_normal((50, 3)) * 3.0
    checks.append(("p2p_loss", lambda: p2p_loss(qa, cloud), [qa], PRIMITIVE_TOL))
    da = _p(rng, (6, 8), "da")
    db = _p(rng, (9, 8), "db")
    rows, nn = np.array([0, 2, 3, 5]), np.array([1, 1, 7, 0])

    def dl():
        C = correspondence_matrix(F.l2_normalize_rows(da), F.l2_normalize_rows(db), rows, nn)
        return descriptor_loss(C, 0.5)
    checks.append(("descriptor_loss", dl, [da, db], PRIMITIVE_TOL))

    def total():
        return total_local_loss((chamfer_prob_loss(qa, transform_var(qb, T), sa, sb),
                                 p2p_loss(qa, cloud), dl()))
    checks.append(("total_local_loss", total, [qa, qb, sa, sb, da, db], PRIMITIVE_TOL))
    return checks


def _tiny_clouds(rng, n_clouds=2):
    clouds = []
    for _ in range(n_clouds):
        # a few poles so every level of the pyramid has structure
        parts = []
        for _ in range(8):
            c = rng.uniform(-12, 12, 2)
            h = rng.uniform(0, 4, 30)
            a = rng.uniform(0, 2 * np.pi, 30)
            parts.append(np.column_stack([c[0] + 0.3 * np.cos(a), c[1] + 0.3 * np.sin(a), h - 0.5]))
        clouds.append(np.vstack(parts))
    return clouds


def network_checks(rng) -> list[Check]:
    net = EgoNN(NetConfig.toy(), seed=int(rng.integers(1 << 31))).astype(np.float64)
    clouds = _tiny_clouds(rng, 4)
    params = net.parameters()
    out = net.forward(clouds, "both")
    wg = rng.standard_normal(out.global_desc.shape)
    T = PoseSE3.from_yaw(0.2, (0.3, 0.1, 0.0))

    def global_loss():
        o = net.forward(clouds, "global")
        return F.sum(F.mul(o.global_desc, wg))

    def local_loss():
        o = net.forward(clouds[:2], "local")
        loc = o.local
        ra, rb = loc.row_indices(0), loc.row_indices(1)
        qa, qb = F.take_rows(loc.positions, ra), F.take_rows(loc.positions, rb)
        c = chamfer_prob_loss(qa, transform_var(qb, T), F.take_rows(loc.saliency, ra),
                              F.take_rows(loc.saliency, rb))
        p = p2p_loss(qa, clouds[0])
        n = min(len(ra), len(rb))
        C = correspondence_matrix(F.take_rows(loc.descriptors, ra), F.take_rows(loc.descriptors, rb),
                                  np.arange(n), np.arange(n)[::-1].copy())
        return total_local_loss((c, p, descriptor_loss(C, 0.02)))

    return [("end_to_end_global", global_loss, params, END_TO_END_TOL),
            ("end_to_end_local", local_loss, params, END_TO_END_TOL)]


def all_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    return dense_checks(rng) + sparse_checks(rng) + loss_checks(rng) + network_checks(rng)


def run_suite(seed: int = 0, n_samples: int = 64) -> list[tuple[str, float, float, int]]:
    """``(name, max relative error, tolerance, skipped coordinates)`` for every check.

    Network checks use a tiny step and drop coordinates where a ReLU or a
    nearest-neighbour assignment switches within the step.
    """
    rng = np.random.default_rng(seed + 1)
    out = []
    for name, builder, params, tol in all_checks(seed):
        if tol == END_TO_END_TOL:
            err, skipped = grad_check_report(builder, params, h=1e-7, n_samples=n_samples, rng=rng,
                                             kink_tol=tol)
        else:
            err, skipped = grad_check_report(builder, params, h=1e-5, n_samples=n_samples, rng=rng)
        out.append((name, err, tol, skipped))
    return out
