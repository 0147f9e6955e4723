"""EgoNN network: cylindrical sparse-voxel trunk with a global and a local branch.

The trunk ``Conv0..Conv7`` halves the resolution at every block from
``Conv1`` on. The global branch merges pyramid levels 5 to 7 into a
descriptor map that is decoded per voxel and GeM pooled; the local branch
merges levels 3 and 4 into a stride-8 map whose every non-empty location
(a supervoxel) regresses one keypoint with a saliency uncertainty and a
unit descriptor.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (FULL_QUANTIZATION, TOY_QUANTIZATION, PoseSE3, QuantizationSpec,
                       as_cloud, cyl_to_cart, quantize)
from .sparse_ad import functional as F
from .sparse_ad.layers import ECA, MLP, BatchNorm, Conv, GeM, Module, TConv
from .sparse_ad.sparse_ops import activation
from .sparse_ad.tape import Var
from .sparse_ad.tensor import SparseTensor

# keeps tanh outputs strictly inside (-1, 1) even when saturated
RAW_SHRINK = 1.0 - 1e-6
MODES = ("global", "local", "both")


@dataclass(frozen=True)
class NetConfig:
    """Layer widths and geometry of the network.

    ``scale`` divides every internal width (trunk, branches, head hidden
    layers); the global (``global_dim``) and local (``desc_dim``) descriptor
    sizes are kept. ``theta_stride_cap`` bounds the cumulative azimuth stride:
    once reached, deeper blocks stride only along rho and z.
    """

    widths: tuple[int, ...] = (32, 32, 64, 64, 128, 128, 128, 128)
    global_width: int = 128
    global_hidden: int = 192
    global_dim: int = 256
    local_width: int = 64
    position_hidden: int = 32
    saliency_hidden: int = 32
    desc_hidden: int = 96
    desc_dim: int = 128
    scale: int = 1
    theta_wrap: bool = True
    theta_stride_cap: int = 8
    gem_p: float = 3.0
    quant: QuantizationSpec = field(default_factory=lambda: FULL_QUANTIZATION)

    def __post_init__(self):
        if len(self.widths) != 8:
            raise ValueError("need eight trunk widths c0..c7")
        dims = (*self.widths, self.global_width, self.global_hidden, self.local_width,
                self.position_hidden, self.saliency_hidden, self.desc_hidden)
        if self.scale < 1 or any(d % self.scale for d in dims):
            raise ValueError(f"scale {self.scale} must divide all internal widths")
        if min(dims) <= 0 or self.global_dim <= 0 or self.desc_dim <= 0:
            raise ValueError("widths must be positive")
        if self.theta_stride_cap < 1 or self.theta_stride_cap & (self.theta_stride_cap - 1):
            raise ValueError("theta_stride_cap must be a power of two")

    @classmethod
    def full(cls) -> "NetConfig":
        return cls()

    @classmethod
    def toy(cls) -> "NetConfig":
        return cls(scale=2, theta_stride_cap=32, quant=TOY_QUANTIZATION)

    def w(self, n: int) -> int:
        return n // self.scale

    def level_strides(self) -> list[tuple[int, int, int]]:
        """Per-block stride of ``Conv1..Conv7`` along (rho, theta, z)."""
        out, cum = [], 1
        for _ in range(7):
            st = 2 if cum < self.theta_stride_cap else 1
            cum *= st
            out.append((2, st, 2))
        return out

    @property
    def supervoxel(self) -> "SupervoxelGrid":
        t = 1
        for st in self.level_strides()[:3]:
            t *= st[1]
        q = self.quant
        return SupervoxelGrid(8 * q.rho_step, t * q.theta_step, 8 * q.z_step)


@dataclass(frozen=True)
class SupervoxelGrid:
    """Extents of one stride-8 cell of the local feature map."""

    s_rho: float = 2.4
    s_theta: float = math.radians(8.0)
    s_z: float = 1.6

    @property
    def sizes(self) -> np.ndarray:
        return np.array([self.s_rho, self.s_theta, self.s_z])

    def centers(self, index: np.ndarray) -> np.ndarray:
        """Cylindrical centers of supervoxels with integer indices ``(i_rho, i_theta, i_z)``."""
        return (np.asarray(index, dtype=np.float64) + 0.5) * self.sizes


@dataclass
class KeypointSet:
    positions: np.ndarray
    raw: np.ndarray
    saliency: np.ndarray
    descriptors: np.ndarray
    supervoxel_centers: np.ndarray

    def __len__(self):
        return len(self.positions)

    def subset(self, rows) -> "KeypointSet":
        rows = np.asarray(rows, dtype=np.int64)
        return KeypointSet(self.positions[rows], self.raw[rows], self.saliency[rows],
                           self.descriptors[rows], self.supervoxel_centers[rows])


@dataclass
class LocalMaps:
    """Differentiable local-branch outputs for a batch, rows grouped by cloud."""

    raw: Var
    positions: Var
    saliency: Var
    descriptors: Var
    centers: np.ndarray
    offsets: np.ndarray

    def rows(self, b: int) -> slice:
        return slice(int(self.offsets[b]), int(self.offsets[b + 1]))

    def row_indices(self, b: int) -> np.ndarray:
        return np.arange(int(self.offsets[b]), int(self.offsets[b + 1]))

    def keypoint_set(self, b: int) -> KeypointSet:
        r = self.rows(b)
        return KeypointSet(np.asarray(self.positions.value[r], dtype=np.float64),
                           np.asarray(self.raw.value[r], dtype=np.float64),
                           np.asarray(self.saliency.value[r, 0], dtype=np.float64),
                           np.asarray(self.descriptors.value[r], dtype=np.float64),
                           self.centers[r])

    def keypoint_sets(self) -> list[KeypointSet]:
        return [self.keypoint_set(b) for b in range(len(self.offsets) - 1)]


@dataclass
class EgoNNOutput:
    global_desc: Var | None
    local: LocalMaps | None

    def descriptors(self) -> np.ndarray | None:
        return None if self.global_desc is None else np.asarray(self.global_desc.value, np.float64)

    def keypoints(self) -> list[KeypointSet] | None:
        return None if self.local is None else self.local.keypoint_sets()


def voxelize(clouds, quant: QuantizationSpec) -> SparseTensor:
    """Quantize a batch of clouds into a single-channel sparse tensor of ones."""
    parts = []
    for b, cloud in enumerate(clouds):
        v = quantize(cloud, quant)
        if len(v) == 0:
            raise ValueError(f"cloud {b}: input too small for network depth (no voxels)")
        parts.append(np.column_stack([np.full(len(v), b, dtype=np.int64), v]))
    coords = np.vstack(parts)
    return SparseTensor.from_coords(coords, np.ones((len(coords), 1), dtype=np.float32),
                                    n_theta=quant.n_theta, batch_size=len(clouds))


class ConvBNReLU(Module):
    def __init__(self, cin, cout, kernel_size, stride, theta_wrap, rng, dtype):
        self.conv = Conv(cin, cout, kernel_size, stride, theta_wrap, rng, dtype)
        self.bn = BatchNorm(cout, dtype)

    def __call__(self, x):
        return activation(self.bn(self.conv(x)), "relu")


class TrunkBlock(Module):
    """Strided 2x2x2 down-conv, two 3x3x3 convs, channel attention."""

    def __init__(self, cin, cout, stride, theta_wrap, rng, dtype):
        self.down = ConvBNReLU(cin, cout, stride, stride, theta_wrap, rng, dtype)
        self.conv1 = ConvBNReLU(cout, cout, 3, 1, theta_wrap, rng, dtype)
        self.conv2 = ConvBNReLU(cout, cout, 3, 1, theta_wrap, rng, dtype)
        self.eca = ECA(rng, dtype)

    def __call__(self, x):
        return self.eca(self.conv2(self.conv1(self.down(x))))


def _add(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    return a.with_feats(F.add(a.feats, b.feats))


class EgoNN(Module):
    def __init__(self, cfg: NetConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg = cfg if cfg is not None else NetConfig.toy()
        rng = np.random.default_rng(seed)
        wrap = cfg.theta_wrap
        c = [cfg.w(x) for x in cfg.widths]
        self.conv0 = ConvBNReLU(1, c[0], 5, 1, wrap, rng, dtype)
        self.blocks = [TrunkBlock(c[k - 1], c[k], st, wrap, rng, dtype)
                       for k, st in zip(range(1, 8), cfg.level_strides())]
        strides = cfg.level_strides()
        gw, lw = cfg.w(cfg.global_width), cfg.w(cfg.local_width)
        self.g_lat = [Conv(c[k], gw, 1, 1, wrap, rng, dtype) for k in (5, 6, 7)]
        self.g_up = [TConv(gw, gw, strides[k - 1], rng, dtype) for k in (6, 7)]
        self.g_mlp = MLP([gw, cfg.w(cfg.global_hidden), cfg.global_dim], rng, dtype)
        self.gem = GeM(cfg.gem_p, dtype)
        self.l_lat = [Conv(c[k], lw, 1, 1, wrap, rng, dtype) for k in (3, 4, 5)]
        self.l_up = [TConv(lw, lw, strides[k - 1], rng, dtype) for k in (4, 5)]
        self.l_pos = MLP([lw, cfg.w(cfg.position_hidden), 3], rng, dtype)
        self.l_sal = MLP([lw, cfg.w(cfg.saliency_hidden), 1], rng, dtype)
        self.l_desc = MLP([lw, cfg.w(cfg.desc_hidden), cfg.desc_dim], rng, dtype)

    def param_groups(self) -> dict[str, list]:
        groups: dict[str, list] = {"trunk": [], "global": [], "local": []}
        for name, p in self.named_parameters():
            key = "global" if name.startswith(("g_", "gem")) else (
                "local" if name.startswith("l_") else "trunk")
            groups[key].append(p)
        return groups

    def parameters_for(self, mode: str) -> list:
        """Parameters reached by a forward pass in ``mode`` (local mode stops the trunk at Conv5)."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        out = []
        for name, p in self.named_parameters():
            if name.startswith(("g_", "gem")) and mode == "local":
                continue
            if name.startswith("l_") and mode == "global":
                continue
            if name.startswith(("blocks.5.", "blocks.6.")) and mode == "local":
                continue
            out.append(p)
        return out

    @property
    def dtype(self):
        return self.conv0.conv.kernel.value.dtype

    def __call__(self, clouds, mode: str = "both") -> EgoNNOutput:
        return self.forward(clouds, mode)

    def forward(self, clouds, mode: str = "both") -> EgoNNOutput:
        """Run the network on a list of ground-removed clouds (or a prebuilt sparse tensor)."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        x = clouds if isinstance(clouds, SparseTensor) else voxelize(clouds, self.cfg.quant)
        if x.feats.value.dtype != self.dtype:
            x = x.with_feats(Var(x.feats.value.astype(self.dtype)))
        last = 7 if mode != "local" else 5
        levels = [self.conv0(x)]
        for block in self.blocks[:last]:
            levels.append(block(levels[-1]))
        g = self._global(levels) if mode in ("global", "both") else None
        loc = self._local(levels) if mode in ("local", "both") else None
        return EgoNNOutput(g, loc)

    def _global(self, levels) -> Var:
        lat5, lat6, lat7 = self.g_lat
        up6, up7 = self.g_up
        top = lat7(levels[7])
        u = _add(up7(top, levels[6]), lat6(levels[6]))
        fg = _add(up6(u, levels[5]), lat5(levels[5]))
        return self.gem(self.g_mlp(fg))

    def _local(self, levels) -> LocalMaps:
        lat3, lat4, lat5 = self.l_lat
        up4, up5 = self.l_up
        top = lat5(levels[5])
        u = _add(up5(top, levels[4]), lat4(levels[4]))
        fl = _add(up4(u, levels[3]), lat3(levels[3]))
        raw = F.mul(activation(self.l_pos(fl), "tanh").feats, RAW_SHRINK)
        sal = activation(self.l_sal(fl), "softplus").feats
        desc = activation(self.l_desc(fl), "l2norm_rows").feats
        grid = self.cfg.supervoxel
        centers = grid.centers(fl.coords[:, 1:])
        pos = decode_keypoints_var(raw, grid, centers)
        return LocalMaps(raw, pos, sal, desc, centers, fl.batch_offsets.copy())

    def describe(self, clouds, mode: str = "both", batch_size: int = 16) -> tuple:
        """Inference helper: numpy global descriptors and keypoint sets, in eval mode."""
        was = self.training
        self.eval()
        descs, kps = [], []
        try:
            for i in range(0, len(clouds), batch_size):
                out = self.forward(clouds[i:i + batch_size], mode)
                if out.global_desc is not None:
                    descs.append(out.descriptors())
                if out.local is not None:
                    kps.extend(out.keypoints())
        finally:
            self.train(was)
        g = np.vstack(descs) if descs else None
        return g, (kps if mode != "global" else None)


def decode_keypoints_var(raw: Var, grid: SupervoxelGrid, centers: np.ndarray) -> Var:
    """Differentiable decoding of normalized offsets to Cartesian keypoints."""
    half = (grid.sizes / 2).astype(F.value(raw).dtype)
    cyl = F.add(F.mul(raw, half), centers.astype(F.value(raw).dtype))
    rho = F.take(cyl, (slice(None), 0))
    theta = F.take(cyl, (slice(None), 1))
    z = F.take(cyl, (slice(None), slice(2, 3)))
    x = F.reshape(F.mul(rho, F.cos(theta)), (-1, 1))
    y = F.reshape(F.mul(rho, F.sin(theta)), (-1, 1))
    return F.concat([x, y, z], axis=1)


def decode_cylindrical(raw, grid: SupervoxelGrid, centers) -> np.ndarray:
    """Absolute cylindrical keypoint coordinates: ``c + raw * s / 2`` per axis."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, 3)
    return np.asarray(centers, dtype=np.float64).reshape(-1, 3) + raw * grid.sizes / 2


def decode_keypoints(raw, grid: SupervoxelGrid, centers) -> np.ndarray:
    return cyl_to_cart(decode_cylindrical(raw, grid, centers))


def select_keypoints(ks: KeypointSet, k: int = 128) -> KeypointSet:
    """The ``k`` keypoints with the lowest saliency uncertainty (ties: lower supervoxel index)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    order = np.argsort(ks.saliency, kind="stable")[:k]
    return ks.subset(order)


def overlap_mask(points_a: np.ndarray, T: PoseSE3, max_range: float) -> np.ndarray:
    """Points of frame ``a`` within ``max_range`` of both sensor origins.

    ``T`` maps frame-``a`` coordinates into frame ``b``, so b's origin sits at
    ``T⁻¹(0)`` in frame ``a``.
    """
    origin_b = T.inverse().translation
    da = np.linalg.norm(points_a, axis=1)
    db = np.linalg.norm(points_a - origin_b, axis=1)
    return (da <= max_range) & (db <= max_range)


def repeatability(ks_a, ks_b, T: PoseSE3, radius: float = 0.5,
                  max_range: float | None = None) -> float:
    """Fraction of a's keypoints (in the overlap) with a b keypoint within ``radius``.

    ``ks_a``/``ks_b`` are keypoint sets or plain ``(N, 3)`` positions; ``T``
    maps a-frame coordinates into b's frame.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    qa = as_cloud(ks_a.positions if isinstance(ks_a, KeypointSet) else ks_a)
    qb = as_cloud(ks_b.positions if isinstance(ks_b, KeypointSet) else ks_b)
    if max_range is not None and len(qa):
        qa = qa[overlap_mask(qa, T, max_range)]
    if len(qa) == 0 or len(qb) == 0:
        warnings.warn("repeatability of an empty keypoint set is reported as 0", RuntimeWarning)
        return 0.0
    qb_in_a = T.inverse().apply(qb)
    d, _ = cKDTree(qb_in_a).query(qa)
    return float(np.mean(d <= radius))


__all__ = [
    "NetConfig", "SupervoxelGrid", "KeypointSet", "LocalMaps", "EgoNNOutput", "EgoNN",
    "voxelize", "decode_keypoints", "decode_keypoints_var", "decode_cylindrical",
    "select_keypoints", "repeatability", "overlap_mask",
]
