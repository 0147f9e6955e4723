"""Training objectives: global triplet loss with batch-hard mining, and the local
keypoint (probabilistic Chamfer, point-to-point) and descriptor losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PoseSE3
from .sparse_ad import functional as F
from .sparse_ad.tape import Var


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    tau: float = 0.02
    lambda_c: float = 1.0
    lambda_p2p: float = 1.0
    lambda_d: float = 1.0
    positive_dist: float = 2.0
    negative_dist: float = 10.0
    corr_radius: float = 0.5

    def __post_init__(self):
        if min(self.margin, self.tau, self.positive_dist, self.corr_radius) <= 0:
            raise ValueError("margin, tau, positive_dist and corr_radius must be positive")
        if min(self.lambda_c, self.lambda_p2p, self.lambda_d) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.positive_dist < self.negative_dist:
            raise ValueError("positive_dist must be smaller than negative_dist")


@dataclass(frozen=True)
class TripletIndex:
    anchor: int
    positive: int
    negative: int


@dataclass
class CorrespondenceMatrix:
    """Cosine similarities ``C`` (rows: filtered keypoints of a) and ground-truth columns."""

    C: Var
    gt: np.ndarray


def pairwise_distances(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    y = x if y is None else y
    d2 = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.sqrt(np.maximum(d2, 0.0))


def mine_batch_hard(embeddings, pos_mask, neg_mask) -> list[TripletIndex]:
    """Hardest positive (farthest) and hardest negative (nearest) per anchor.

    Anchors lacking a positive or a negative are skipped. Ties go to the lowest index.
    """
    e = np.asarray(F.value(embeddings), dtype=np.float64)
    pos = np.asarray(pos_mask, dtype=bool).copy()
    neg = np.asarray(neg_mask, dtype=bool).copy()
    np.fill_diagonal(pos, False)
    np.fill_diagonal(neg, False)
    d = pairwise_distances(e)
    out = []
    for a in range(len(e)):
        if not pos[a].any() or not neg[a].any():
            continue
        p = int(np.argmax(np.where(pos[a], d[a], -np.inf)))
        n = int(np.argmin(np.where(neg[a], d[a], np.inf)))
        out.append(TripletIndex(a, p, n))
    return out


def triplet_loss(a, p, n, margin: float = 0.2) -> Var:
    """Mean over rows of ``max(|a - p| - |a - n| + margin, 0)``."""
    a, p, n = (x if isinstance(x, Var) else Var(np.atleast_2d(np.asarray(x, dtype=np.float64)))
               for x in (a, p, n))
    hinge = F.relu(F.add(F.sub(F.norm_rows(F.sub(a, p)), F.norm_rows(F.sub(a, n))), margin))
    return F.mean(hinge)


def batch_triplet_loss(embeddings: Var, triplets: list[TripletIndex], margin: float = 0.2) -> Var:
    idx = np.array([(t.anchor, t.positive, t.negative) for t in triplets], dtype=np.int64)
    return triplet_loss(F.take_rows(embeddings, idx[:, 0]), F.take_rows(embeddings, idx[:, 1]),
                        F.take_rows(embeddings, idx[:, 2]), margin)


def nearest(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``y`` for each row of ``x`` (exhaustive, ties to lowest index)."""
    if len(y) == 0:
        raise ValueError("nearest neighbor in an empty set")
    out = np.empty(len(x), dtype=np.int64)
    step = max(1, 2_000_000 // max(len(y), 1))
    for s in range(0, len(x), step):
        d2 = ((x[s:s + step, None, :] - y[None, :, :]) ** 2).sum(-1)
        out[s:s + step] = np.argmin(d2, axis=1)
    return out


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def _flat(x: Var) -> Var:
    return F.reshape(x, (-1,))


def chamfer_prob_loss(qa, qb, sigma_a, sigma_b) -> Var:
    """Probabilistic Chamfer loss between keypoints of a and b (b already in a's frame).

    ``sum_i ln s_i + d_i / s_i`` over both directions, with ``d`` the distance
    to the nearest keypoint of the other set and ``s`` the mean uncertainty of
    the matched pair. Nearest-neighbor assignments are treated as constants.
    """
    qa, qb, sa, sb = (_as_var(v) for v in (qa, qb, sigma_a, sigma_b))
    sa, sb = _flat(sa), _flat(sb)
    if qa.shape[0] == 0 or qb.shape[0] == 0:
        raise ValueError("chamfer loss needs non-empty keypoint sets")
    va, vb = np.asarray(qa.value, np.float64), np.asarray(qb.value, np.float64)

    def direction(q, other, s_self, s_other, nn):
        d = F.norm_rows(F.sub(q, F.take_rows(other, nn)))
        s = F.mul(F.add(s_self, F.take_rows(s_other, nn)), 0.5)
        return F.sum(F.add(F.log(s), F.div(d, s)))

    return F.add(direction(qa, qb, sa, sb, nearest(va, vb)),
                 direction(qb, qa, sb, sa, nearest(vb, va)))


def p2p_loss(q, cloud) -> Var:
    """Sum of distances from each keypoint to its nearest input point."""
    q = _as_var(q)
    pts = np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("point-to-point loss needs a non-empty cloud")
    _, idx = cKDTree(pts).query(np.asarray(q.value, np.float64))
    target = pts[idx].astype(q.value.dtype)
    return F.sum(F.norm_rows(F.sub(q, target)))


def p2p_pair_loss(qa, cloud_a, qb, cloud_b) -> Var:
    return F.add(p2p_loss(qa, cloud_a), p2p_loss(qb, cloud_b))


def transform_var(q, T: PoseSE3) -> Var:
    """Apply a constant rigid transform to differentiable ``(N, 3)`` points."""
    q = _as_var(q)
    dt = q.value.dtype
    return F.add(F.matmul(q, T.rotation.T.astype(dt)), T.translation.astype(dt))


def gt_correspondences(qa, qb, T: PoseSE3, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows of a whose nearest b keypoint (brought into a's frame by ``T⁻¹``) is within ``radius``.

    ``T`` maps a-frame coordinates into b's frame. Returns ``(rows, nn)``.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    a = np.asarray(F.value(qa), np.float64).reshape(-1, 3)
    b = T.inverse().apply(np.asarray(F.value(qb), np.float64).reshape(-1, 3))
    if len(a) == 0 or len(b) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    nn = nearest(a, b)
    d = np.linalg.norm(a - b[nn], axis=1)
    rows = np.flatnonzero(d <= radius)
    return rows, nn[rows]


def correspondence_matrix(desc_a, desc_b, rows, nn) -> CorrespondenceMatrix:
    da = F.take_rows(_as_var(desc_a), np.asarray(rows, np.int64))
    return CorrespondenceMatrix(F.matmul(da, F.transpose(_as_var(desc_b))), np.asarray(nn, np.int64))


def descriptor_loss(C: CorrespondenceMatrix, tau: float = 0.02) -> Var:
    """Cross-entropy of classifying each row's ground-truth column from ``C / tau``."""
    logits = F.mul(_as_var(C.C), 1.0 / tau)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("descriptor loss needs at least one correspondence")
    picked = F.take(logits, (np.arange(n), C.gt))
    return F.mean(F.sub(F.logsumexp(logits, axis=1), picked))


def total_local_loss(parts, cfg: LossConfig = LossConfig()) -> Var:
    """``lambda_c * L_c + lambda_p2p * L_p2p + lambda_d * L_d``; zero-weight or absent terms are skipped."""
    if isinstance(parts, dict):
        parts = (parts.get("chamfer"), parts.get("p2p"), parts.get("descriptor"))
    total = None
    for lam, term in zip((cfg.lambda_c, cfg.lambda_p2p, cfg.lambda_d), parts):
        if term is None or lam == 0:
            continue
        v = F.mul(_as_var(term), lam)
        total = v if total is None else F.add(total, v)
    return total if total is not None else Var(np.zeros(()))
