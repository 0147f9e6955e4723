import itertools

import numpy as np
import pytest

from egonn.sparse_ad import Parameter, SparseTensor, Tape, Var, functional as F
from egonn.sparse_ad import sparse_ops as S
from egonn.sparse_ad.checkpoint import (CheckpointError, load_arrays, load_checkpoint,
                                        save_arrays, save_checkpoint)
from egonn.sparse_ad.gradcheck import grad_check
from egonn.sparse_ad.layers import MLP, BatchNorm, Conv, Module, TConv
from egonn.sparse_ad.tensor import CoordIndex, pack_keys, unpack_keys


def random_tensor(rng, n=20, box=(4, 6, 4), batch=2, channels=3, n_theta=6, dtype=np.float64):
    cells = [(b, r, t, z) for b in range(batch) for r in range(box[0])
             for t in range(box[1]) for z in range(box[2])]
    pick = rng.choice(len(cells), size=n, replace=False)
    coords = np.array([cells[i] for i in pick])
    feats = rng.standard_normal((n, channels)).astype(dtype)
    return SparseTensor.from_coords(coords, feats, n_theta=n_theta, batch_size=batch)


def dense_conv_oracle(x: SparseTensor, kernel, kernel_size, wrap):
    """Literal definition: dictionary lookup per output voxel and kernel offset."""
    table = {tuple(c): x.feats.value[i] for i, c in enumerate(x.coords)}
    ranges = [range(-(k // 2), k // 2 + 1) for k in kernel_size]
    out = np.zeros((len(x), kernel.shape[2]))
    for row, (b, r, t, z) in enumerate(x.coords):
        for k, (dr, dt, dz) in enumerate(itertools.product(*ranges)):
            tt = t + dt
            if wrap:
                tt %= x.n_theta
            f = table.get((b, r + dr, tt, z + dz))
            if f is not None:
                out[row] += f @ kernel[k]
    return out


@pytest.mark.parametrize("ks", [(3, 3, 3), (5, 5, 5), (1, 1, 1), (3, 1, 3)])
@pytest.mark.parametrize("wrap", [True, False])
def test_conv_matches_dense_oracle(ks, wrap):
    rng = np.random.default_rng(1)
    for _ in range(3):
        x = random_tensor(rng)
        k = rng.standard_normal((int(np.prod(ks)), 3, 2))
        out = S.sparse_conv(x, Var(k), ks, 1, wrap)
        np.testing.assert_allclose(out.feats.value, dense_conv_oracle(x, k, ks, wrap), atol=1e-10)


def test_theta_wrap_connects_first_and_last_bins():
    x = SparseTensor.from_coords([[0, 0, 0, 0], [0, 0, 5, 0]], np.array([[1.0], [10.0]]), n_theta=6)
    k = np.zeros((27, 1, 1))
    center = 13
    k[center] = 1.0
    k[center - 3] = 100.0  # offset (0, -1, 0)
    wrapped = S.sparse_conv(x, Var(k), 3, 1, True).feats.value[:, 0]
    flat = S.sparse_conv(x, Var(k), 3, 1, False).feats.value[:, 0]
    np.testing.assert_allclose(wrapped, [1.0 + 1000.0, 10.0])
    np.testing.assert_allclose(flat, [1.0, 10.0])


def test_strided_conv_oracle_and_stride_bookkeeping():
    rng = np.random.default_rng(2)
    x = random_tensor(rng, n=40)
    k = rng.standard_normal((8, 3, 4))
    y = S.sparse_conv(x, Var(k), 2, 2)
    assert y.stride == (2, 2, 2) and y.n_theta == 3
    expected = {}
    for i, (b, r, t, z) in enumerate(x.coords):
        parent = (b, r // 2, t // 2, z // 2)
        kidx = (r % 2) * 4 + (t % 2) * 2 + z % 2
        expected[parent] = expected.get(parent, 0) + x.feats.value[i] @ k[kidx]
    assert sorted(expected) == [tuple(c) for c in y.coords]
    for row, c in enumerate(y.coords):
        np.testing.assert_allclose(y.feats.value[row], expected[tuple(c)], atol=1e-12)


def test_anisotropic_stride_keeps_theta():
    rng = np.random.default_rng(3)
    x = random_tensor(rng, n=30)
    y = S.sparse_conv(x, Var(rng.standard_normal((4, 3, 2))), (2, 1, 2), (2, 1, 2))
    assert y.stride == (2, 1, 2) and y.n_theta == x.n_theta
    assert set(map(tuple, y.coords)) == {(b, r // 2, t, z // 2) for b, r, t, z in x.coords}


def test_tconv_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(4)
    x = random_tensor(rng, n=40)
    k = rng.standard_normal((8, 3, 5))
    y = S.sparse_conv(x, Var(k), 2, 2)
    g = rng.standard_normal((len(y), 5))
    # <conv(x), g> == <x, tconv(g)> with the kernel transposed per offset
    lhs = np.sum(y.feats.value * g)
    up = S.sparse_tconv(y.with_feats(Var(g)), Var(np.transpose(k, (0, 2, 1))), x, 2)
    rhs = np.sum(x.feats.value * up.feats.value)
    assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


def test_conv_translation_equivariance_away_from_boundary():
    rng = np.random.default_rng(5)
    x = random_tensor(rng, n=25, box=(5, 6, 5), n_theta=6)
    k = Var(rng.standard_normal((27, 3, 2)))
    a = S.sparse_conv(x, k, 3, 1, True)
    shifted = x.coords + np.array([0, 3, 2, -4])
    shifted[:, 2] %= 6
    y = SparseTensor.from_coords(shifted, x.feats.value[np.argsort(pack_keys(x.coords))], n_theta=6,
                                 batch_size=2)
    b = S.sparse_conv(y, k, 3, 1, True)
    fa = {tuple(c): f for c, f in zip(x.coords, a.feats.value)}
    fb = {tuple(c): f for c, f in zip(y.coords, b.feats.value)}
    for (bt, r, t, z), f in fa.items():
        np.testing.assert_allclose(fb[(bt, r + 3, (t + 2) % 6, z - 4)], f, atol=1e-12)


def test_pack_roundtrip_and_lookup():
    rng = np.random.default_rng(6)
    c = np.column_stack([rng.integers(0, 40, 200), rng.integers(-3000, 3000, (200, 3))])
    np.testing.assert_array_equal(unpack_keys(pack_keys(c)), c)
    keys = np.unique(pack_keys(c))
    idx = CoordIndex(keys)
    np.testing.assert_array_equal(idx.lookup(keys), np.arange(len(keys)))
    assert idx.lookup(np.array([keys.max() + 1]))[0] == -1


def test_duplicate_coordinates_rejected():
    with pytest.raises(ValueError):
        SparseTensor.from_coords([[0, 1, 1, 1], [0, 1, 1, 1]], np.zeros((2, 1)))


# ---------------------------------------------------------------- gradients

def _param(rng, shape, name, scale=1.0, offset=0.0):
    return Parameter(offset + scale * rng.standard_normal(shape), name)


UNARY = {
    "exp": (F.exp, 0.0), "log": (F.log, 3.0), "sqrt": (F.sqrt, 3.0), "cos": (F.cos, 0.0),
    "sin": (F.sin, 0.0), "tanh": (F.tanh, 0.0), "sigmoid": (F.sigmoid, 0.0),
    "softplus": (F.softplus, 0.0), "relu": (F.relu, 0.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn, offset = UNARY[name]
    rng = np.random.default_rng(7)
    a = _param(rng, (4, 3), "a", offset=offset)
    if name == "relu":
        a.value[np.abs(a.value) < 1e-2] = 0.5
    w = rng.standard_normal((4, 3))
    assert grad_check(lambda: F.sum(F.mul(fn(a), w)), [a]) < 1e-4


def test_binary_and_structural_gradients():
    rng = np.random.default_rng(8)
    a = _param(rng, (4, 3), "a")
    b = _param(rng, (3,), "b", offset=3.0)
    m = _param(rng, (3, 2), "m")
    w = rng.standard_normal((2, 7))

    def loss():
        x = F.div(F.sub(F.add(a, b), F.mul(a, b)), b)
        x = F.matmul(x, m)
        x = F.concat([x, F.take_rows(x, np.array([0, 0, 3]))], axis=0)
        x = F.reshape(F.transpose(x), (-1,))
        head = F.sum(F.take(x, slice(2, 10)))
        return F.add(head, F.mean(F.mul(F.reshape(x, (2, 7)), w)))
    assert grad_check(loss, [a, b, m]) < 1e-4


def test_power_norm_logsumexp_gradients():
    rng = np.random.default_rng(9)
    a = _param(rng, (5, 4), "a")
    p = Parameter(np.array([2.7]), "p")
    pos = Parameter(np.abs(rng.standard_normal((5, 4))) + 0.5, "pos")
    w = rng.standard_normal((5, 4))

    def loss():
        return F.add(F.add(F.sum(F.power(pos, p)), F.sum(F.mul(F.l2_normalize_rows(a), w))),
                     F.add(F.sum(F.logsumexp(F.mul(a, 30.0), axis=1)), F.sum(F.norm_rows(a))))
    assert grad_check(loss, [a, p, pos]) < 1e-4


def test_conv_bn_eca_gem_gradients():
    rng = np.random.default_rng(10)
    x = random_tensor(rng, n=30, channels=4)
    feats = Parameter(x.feats.value.copy(), "x")
    k3 = _param(rng, (27, 4, 5), "k3", 0.3)
    kd = _param(rng, (8, 5, 6), "kd", 0.3)
    ku = _param(rng, (8, 6, 3), "ku", 0.3)
    gamma = Parameter(1 + 0.1 * rng.standard_normal(5), "gamma")
    beta = Parameter(0.1 * rng.standard_normal(5), "beta")
    ek = _param(rng, (3,), "eca", 0.5)
    p = Parameter(np.array([3.0]), "p")
    state = S.BatchNormState(5, np.float64)
    w = rng.standard_normal((2, 3))

    def loss():
        t = x.with_feats(feats)
        h = S.sparse_conv(t, k3, 3)
        h = S.batch_norm(h, gamma, beta, state, training=True)
        h = S.eca(h, ek)
        d = S.sparse_conv(h, kd, 2, 2)
        u = S.sparse_tconv(d, ku, t)
        u = S.activation(u, "softplus")
        return F.sum(F.mul(S.gem_pool(u, p), w))
    assert grad_check(loss, [feats, k3, kd, ku, gamma, beta, ek, p], n_samples=120) < 1e-4


def test_batch_norm_eval_uses_running_stats():
    rng = np.random.default_rng(11)
    x = random_tensor(rng, n=30, channels=2)
    bn = BatchNorm(2, np.float64)
    bn(x)
    bn.eval()
    out = bn(x).feats.value
    st = bn.state
    np.testing.assert_allclose(out, (x.feats.value - st.running_mean) / np.sqrt(st.running_var + 1e-5))
    np.testing.assert_allclose(st.running_mean, 0.1 * x.feats.value.mean(0))


def test_no_recording_outside_tape():
    a = Parameter(np.ones(3), "a")
    out = F.exp(a)
    assert out.requires_grad is False or getattr(out, "_node", None) is None
    with Tape() as tape:
        F.exp(a)
        assert len(tape.nodes) == 1


# ---------------------------------------------------------------- checkpoints

class _Net(Module):
    def __init__(self):
        rng = np.random.default_rng(0)
        self.conv = Conv(2, 3, rng=rng)
        self.up = TConv(3, 2, rng=rng)
        self.bn = BatchNorm(3)
        self.mlp = MLP([3, 4, 2], rng=rng)


def test_checkpoint_roundtrip(tmp_path):
    net = _Net()
    net.bn.state.running_mean[:] = [1, 2, 3]
    path = tmp_path / "m.egonn"
    save_checkpoint(path, net, {"opt.step": np.array([7.0])})
    other = _Net()
    for p in other.parameters():
        p.value[...] = 0
    extra = load_checkpoint(path, other)
    assert extra["opt.step"][0] == 7
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), other.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.value, p2.value)
    np.testing.assert_array_equal(other.bn.state.running_mean, [1, 2, 3])


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOTIT")
    with pytest.raises(CheckpointError):
        load_arrays(bad)
    save_arrays(tmp_path / "ok", {"a": np.ones((2, 3))})
    raw = (tmp_path / "ok").read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "trunc")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ok", _Net())
