"""Coordinate systems, rigid transforms, preprocessing, quantization and augmentations.

Point clouds are plain ``(N, 3)`` float arrays of Cartesian coordinates in
meters, expressed in the sensor frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
# Below this radius the azimuth is undefined and set to 0.
RHO_EPS = 1e-9
# det(R) = 1 and RᵀR = I must hold to this tolerance
POSE_TOL = 1e-9


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 3), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform mapping sensor-frame points to the world (or another) frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        dev = max(abs(np.linalg.det(r) - 1.0), np.abs(r.T @ r - np.eye(3)).max())
        if dev > POSE_TOL:
            raise ValueError(f"rotation is not a proper orthonormal matrix (deviation {dev:.3g})")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls(yaw_matrix(yaw), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_3x4(self) -> np.ndarray:
        return self.matrix()[:3]

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            return np.zeros((0, 3))
        return pts @ self.rotation.T + self.translation

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def is_valid(self, tol: float = POSE_TOL) -> bool:
        r = self.rotation
        return (abs(np.linalg.det(r) - 1.0) <= tol
                and np.abs(r.T @ r - np.eye(3)).max() <= tol)


def se3_apply(T: PoseSE3, cloud) -> np.ndarray:
    return T.apply(cloud)


def se3_inverse(T: PoseSE3) -> PoseSE3:
    return T.inverse()


def se3_relative(Ta: PoseSE3, Tb: PoseSE3) -> PoseSE3:
    """Transform taking frame-b coordinates into frame a: ``Ta⁻¹ ∘ Tb``."""
    return Ta.inverse().compose(Tb)


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(rotation)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def cart_to_cyl(points) -> np.ndarray:
    """Convert ``(N, 3)`` Cartesian points to ``(rho, theta, z)`` with theta in [0, 2π)."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    rho = np.hypot(pts[:, 0], pts[:, 1])
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    theta = np.where(theta < 0.0, theta + TWO_PI, theta)
    # arctan2 of a tiny negative y can round up to exactly 2π
    theta = np.where(theta >= TWO_PI, 0.0, theta)
    theta = np.where(rho < RHO_EPS, 0.0, theta)
    out = np.stack([rho, theta, pts[:, 2]], axis=1)
    return out[0] if single else out


def cyl_to_cart(cyl) -> np.ndarray:
    c = np.asarray(cyl, dtype=np.float64)
    single = c.ndim == 1
    c = c.reshape(-1, 3)
    out = np.stack([c[:, 0] * np.cos(c[:, 1]), c[:, 0] * np.sin(c[:, 1]), c[:, 2]], axis=1)
    return out[0] if single else out


def remove_ground(cloud, z_min: float = -0.9) -> np.ndarray:
    """Keep points strictly above ``z_min`` (a plain height threshold, no plane fit)."""
    if math.isnan(z_min) or z_min == math.inf:
        raise ValueError("z_min must be finite or -inf")
    pts = as_cloud(cloud)
    return pts[pts[:, 2] > z_min]


@dataclass(frozen=True)
class QuantizationSpec:
    rho_step: float = 0.3
    theta_step: float = math.radians(1.0)
    z_step: float = 0.2

    def __post_init__(self):
        if min(self.rho_step, self.theta_step, self.z_step) <= 0:
            raise ValueError("quantization steps must be positive")
        bins = TWO_PI / self.theta_step
        if abs(bins - round(bins)) > 1e-6:
            raise ValueError(f"2π / theta_step must be an integer, got {bins}")

    @property
    def n_theta(self) -> int:
        return int(round(TWO_PI / self.theta_step))

    @classmethod
    def from_bins(cls, rho_step: float, n_theta: int, z_step: float) -> "QuantizationSpec":
        return cls(rho_step, TWO_PI / n_theta, z_step)

    @property
    def steps(self) -> np.ndarray:
        return np.array([self.rho_step, self.theta_step, self.z_step])


FULL_QUANTIZATION = QuantizationSpec(0.3, math.radians(1.0), 0.2)
# 384 azimuth bins (0.9375°): the stride-8 supervoxel spans 7.5°, and the
# count is divisible by 32 so a rotation by 32 bins is an exact cyclic shift
# at every pyramid level.
TOY_QUANTIZATION = QuantizationSpec.from_bins(0.3, 384, 0.2)


def quantize(cloud, q: QuantizationSpec) -> np.ndarray:
    """Quantize a cloud into unique cylindrical voxel indices ``(i_rho, i_theta, i_z)``.

    Returns an ``(M, 3)`` int64 array sorted lexicographically. Every returned
    voxel is occupied and carries the feature value 1 downstream.
    """
    pts = as_cloud(cloud)
    if len(pts) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    cyl = cart_to_cyl(pts)
    idx = np.floor(cyl / q.steps).astype(np.int64)
    idx[:, 1] %= q.n_theta
    return np.unique(idx, axis=0)


def random_yaw_rotation(cloud, yaw: float) -> np.ndarray:
    return as_cloud(cloud) @ yaw_matrix(yaw).T


def remove_cuboid(cloud, center, size) -> np.ndarray:
    pts = as_cloud(cloud)
    half = 0.5 * np.asarray(size, dtype=np.float64)
    inside = np.all(np.abs(pts - np.asarray(center)) < half, axis=1)
    return pts[~inside]


def augment_global(cloud, rng: np.random.Generator, sigma: float = 0.1,
                   cuboid_side: tuple[float, float] = (2.0, 10.0),
                   rotate: bool = True) -> np.ndarray:
    """Cuboid removal, Gaussian jitter, then a uniform random rotation about z."""
    pts = as_cloud(cloud)
    if len(pts) and cuboid_side[1] > 0:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center = rng.uniform(lo, hi)
        size = rng.uniform(cuboid_side[0], cuboid_side[1], size=3)
        pts = remove_cuboid(pts, center, size)
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, size=pts.shape)
    if rotate:
        pts = random_yaw_rotation(pts, rng.uniform(0.0, TWO_PI))
    return pts


def augment_local(cloud, rng: np.random.Generator, max_translation: float = 5.0,
                  rotate: bool = True) -> tuple[np.ndarray, PoseSE3]:
    """Random z-rotation plus an x-y translation with norm at most ``max_translation``.

    Returns the transformed cloud and the transform that was applied to it.
    """
    pts = as_cloud(cloud)
    yaw = rng.uniform(0.0, TWO_PI) if rotate else 0.0
    # uniform over the disk
    r = max_translation * math.sqrt(rng.uniform(0.0, 1.0))
    phi = rng.uniform(0.0, TWO_PI)
    T = PoseSE3.from_yaw(yaw, (r * math.cos(phi), r * math.sin(phi), 0.0))
    return T.apply(pts), T


def decimate_trajectory(poses: Sequence[PoseSE3], min_disp: float) -> list[int]:
    """Greedy filter dropping poses closer than ``min_disp`` to the last kept one."""
    if min_disp < 0:
        raise ValueError("min_disp must be non-negative")
    keep: list[int] = []
    last = None
    for i, pose in enumerate(poses):
        if last is None or np.linalg.norm(pose.translation - last) >= min_disp:
            keep.append(i)
            last = pose.translation
    return keep
