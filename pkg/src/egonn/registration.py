"""Descriptor matching, RANSAC + Kabsch rigid registration, point-to-point ICP and pose errors.

Every transform ``T`` here maps coordinates of the first (source, ``a``)
cloud into the frame of the second (target, ``b``) cloud.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PoseSE3, as_cloud


class DegenerateSample(ValueError):
    """Correspondences too close to collinear to fix a rotation."""


@dataclass
class MatchSet:
    ia: np.ndarray
    ib: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.ia)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(b), float(s)) for a, b, s in zip(self.ia, self.ib, self.scores)]

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))


def match_descriptors(da, db, mutual: bool = False) -> MatchSet:
    """Match each row of ``da`` to its highest-cosine row of ``db`` (rows assumed unit length)."""
    da = np.asarray(da, dtype=np.float64)
    db = np.asarray(db, dtype=np.float64)
    if len(da) == 0 or len(db) == 0:
        return MatchSet.empty()
    sim = da @ db.T
    best_b = np.argmax(sim, axis=1)
    ia = np.arange(len(da))
    if mutual:
        best_a = np.argmax(sim, axis=0)
        ia = ia[best_a[best_b] == ia]
    ib = best_b[ia]
    return MatchSet(ia, ib, np.clip(sim[ia, ib], -1.0, 1.0))


def _kabsch_batch(a: np.ndarray, b: np.ndarray, w: np.ndarray | None = None):
    """Least-squares rotations/translations for stacked correspondence sets ``(H, K, 3)``."""
    if w is None:
        w = np.ones(a.shape[:2])
    w = w / w.sum(axis=1, keepdims=True)
    ca = (w[..., None] * a).sum(axis=1)
    cb = (w[..., None] * b).sum(axis=1)
    A = a - ca[:, None]
    B = b - cb[:, None]
    H = np.einsum("hk,hki,hkj->hij", w, A, B)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("hji,hkj->hik", Vt, U)))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.einsum("hji,hjk,hlk->hil", Vt, D, U)
    t = cb - np.einsum("hij,hj->hi", R, ca)
    return R, t


def _spread(pts: np.ndarray) -> np.ndarray:
    """Second singular value of the centered point sets ``(H, K, 3)`` (0 when collinear)."""
    c = pts - pts.mean(axis=1, keepdims=True)
    return np.linalg.svd(c, compute_uv=False)[:, 1]


def kabsch(a, b, weights=None, min_spread: float = 1e-6) -> PoseSE3:
    """Rigid transform minimizing ``sum |R a_i + t - b_i|^2`` (SVD with reflection fix)."""
    a = as_cloud(a)
    b = as_cloud(b)
    if len(a) != len(b):
        raise ValueError("kabsch needs paired points")
    if len(a) < 3:
        raise DegenerateSample("kabsch needs at least 3 correspondences")
    if _spread(a[None])[0] < min_spread or _spread(b[None])[0] < min_spread:
        raise DegenerateSample("correspondences are (nearly) collinear")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)[None]
    R, t = _kabsch_batch(a[None], b[None], w)
    return PoseSE3(R[0], t[0])


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 2000
    inlier_radius: float = 0.5
    min_inliers: int = 6
    confidence: float = 0.999
    seed: int = 0
    batch: int = 100

    def __post_init__(self):
        if self.max_iters < 1 or self.batch < 1:
            raise ValueError("max_iters and batch must be at least 1")
        if self.inlier_radius <= 0:
            raise ValueError("inlier_radius must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass
class RansacResult:
    pose: PoseSE3
    inliers: np.ndarray
    success: bool
    iterations: int

    def __iter__(self):
        yield self.pose
        yield self.inliers


def _required_iters(inlier_ratio: float, confidence: float, sample: int = 3) -> float:
    good = inlier_ratio ** sample
    if good <= 0:
        return math.inf
    if good >= 1:
        return 1
    return math.log(1 - confidence) / math.log(1 - good)


def ransac_register(matches: MatchSet, qa, qb, cfg: RansacConfig = RansacConfig()) -> RansacResult:
    """Robust rigid fit from putative matches ``qa[ia] <-> qb[ib]``.

    Hypotheses come from random 3-match samples, scored by the number of
    matches within ``inlier_radius`` after transformation, drawn in batches
    until the adaptive bound for ``confidence`` (or ``max_iters``) is reached.
    The best hypothesis is refit on its inliers until the inlier set is stable.
    Failure (fewer than ``min_inliers``) is reported in the result, not raised.
    """
    qa = as_cloud(qa)
    qb = as_cloud(qb)
    a = qa[matches.ia]
    b = qb[matches.ib]
    n = len(a)
    fail = RansacResult(PoseSE3.identity(), np.zeros(0, np.int64), False, 0)
    if n < 3:
        return fail
    rng = np.random.default_rng(cfg.seed)
    r2 = cfg.inlier_radius ** 2
    best_count, best_R, best_t = -1, None, None
    iters = 0
    bound = float(cfg.max_iters)
    while iters < min(cfg.max_iters, bound):
        h = int(min(cfg.batch, cfg.max_iters - iters))
        # three distinct indices per hypothesis
        s0 = rng.integers(0, n, h)
        s1 = (s0 + rng.integers(1, n, h)) % n
        s2 = rng.integers(0, n - 2, h)
        lo, hi = np.minimum(s0, s1), np.maximum(s0, s1)
        s2 = s2 + (s2 >= lo)
        s2 = s2 + (s2 >= hi)
        idx = np.stack([s0, s1, s2], axis=1)
        iters += h
        sa, sb = a[idx], b[idx]
        ok = (_spread(sa) > 1e-6) & (_spread(sb) > 1e-6)
        if not ok.any():
            continue
        R, t = _kabsch_batch(sa[ok], sb[ok])
        res = np.einsum("hij,nj->hni", R, a) + t[:, None, :] - b[None]
        counts = ((res ** 2).sum(-1) <= r2).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_R, best_t = int(counts[k]), R[k], t[k]
            bound = _required_iters(best_count / n, cfg.confidence)
    if best_R is None:
        return RansacResult(PoseSE3.identity(), np.zeros(0, np.int64), False, iters)
    inliers = _inliers(best_R, best_t, a, b, r2)
    R, t = best_R, best_t
    for _ in range(10):
        if len(inliers) < 3:
            break
        try:
            pose = kabsch(a[inliers], b[inliers])
        except DegenerateSample:
            break
        R, t = pose.rotation, pose.translation
        new = _inliers(R, t, a, b, r2)
        if np.array_equal(new, inliers):
            break
        if len(new) < len(inliers):
            break
        inliers = new
    success = len(inliers) >= cfg.min_inliers
    return RansacResult(PoseSE3(R, t), inliers, success, iters)


def _inliers(R, t, a, b, r2) -> np.ndarray:
    res = a @ R.T + t - b
    return np.flatnonzero((res ** 2).sum(1) <= r2)


def icp_p2p(source, target, init: PoseSE3 | None = None, max_iters: int = 50, tol: float = 1e-6,
            max_corr_dist: float | None = None) -> PoseSE3:
    """Point-to-point ICP aligning ``source`` onto ``target``, starting from ``init``.

    Stops when the mean residual changes by less than ``tol`` or after
    ``max_iters`` iterations; returns the best pose found.
    """
    src = as_cloud(source)
    tgt = as_cloud(target)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("ICP needs non-empty clouds")
    tree = cKDTree(tgt)
    pose = init if init is not None else PoseSE3.identity()
    best_pose, best_err = pose, math.inf
    prev = math.inf
    for _ in range(max_iters):
        moved = pose.apply(src)
        d, idx = tree.query(moved)
        keep = d <= max_corr_dist if max_corr_dist is not None else np.ones(len(d), bool)
        err = float(d[keep].mean()) if keep.any() else math.inf
        if err < best_err:
            best_pose, best_err = pose, err
        if abs(prev - err) < tol or keep.sum() < 3:
            break
        prev = err
        try:
            pose = kabsch(src[keep], tgt[idx[keep]])
        except DegenerateSample:
            break
    return best_pose


@dataclass(frozen=True)
class PoseErrors:
    rte: float
    rre: float
    success: bool


def pose_errors(T_est: PoseSE3, T_gt: PoseSE3, max_rte: float = 2.0,
                max_rre: float = 5.0) -> PoseErrors:
    """Translation (m) and rotation (deg) error of ``T_gt⁻¹ ∘ T_est``."""
    delta = T_gt.inverse().compose(T_est)
    rte = float(np.linalg.norm(delta.translation))
    c = np.clip((np.trace(delta.rotation) - 1.0) / 2.0, -1.0, 1.0)
    rre = math.degrees(math.acos(c))
    return PoseErrors(rte, rre, rte <= max_rte and rre <= max_rre)
