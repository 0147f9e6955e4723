"""Two-stage relocalization: global-descriptor retrieval, then keypoint matching + RANSAC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import PoseSE3, cyl_to_cart, remove_ground, se3_relative
from .model import EgoNN, KeypointSet, select_keypoints
from .registration import RansacConfig, RansacResult, match_descriptors, pose_errors, ransac_register
from .retrieval import DescriptorDB, query_topk

SELECTIONS = ("saliency", "random", "centers")


@dataclass
class Features:
    descriptors: np.ndarray
    keypoints: list[KeypointSet]


def extract(model: EgoNN, clouds: Sequence[np.ndarray], z_min: float = -0.9,
            batch_size: int = 16) -> Features:
    """Global descriptors and full keypoint sets of raw sensor clouds (ground removed here)."""
    pre = [remove_ground(c, z_min) for c in clouds]
    g, kps = model.describe(pre, "both", batch_size)
    return Features(g, kps)


def choose_keypoints(ks: KeypointSet, k: int = 128, selection: str = "saliency",
                     rng: np.random.Generator | None = None) -> KeypointSet:
    """Keypoints used for registration.

    ``saliency`` keeps the ``k`` lowest-uncertainty keypoints; ``random``
    keeps ``k`` uniformly random ones; ``centers`` additionally replaces the
    regressed positions with their supervoxel centers.
    """
    if selection not in SELECTIONS:
        raise ValueError(f"selection must be one of {SELECTIONS}")
    if selection == "saliency":
        return select_keypoints(ks, k)
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = np.sort(rng.choice(len(ks), size=min(k, len(ks)), replace=False))
    sub = ks.subset(rows)
    if selection == "centers":
        sub.positions = cyl_to_cart(sub.supervoxel_centers)
    return sub


def register_pair(ks_a: KeypointSet, ks_b: KeypointSet, k: int = 128, selection: str = "saliency",
                  ransac: RansacConfig = RansacConfig(), rng: np.random.Generator | None = None,
                  mutual: bool = False) -> RansacResult:
    """Estimate the transform mapping cloud a's frame into cloud b's frame."""
    a = choose_keypoints(ks_a, k, selection, rng)
    b = choose_keypoints(ks_b, k, selection, rng)
    matches = match_descriptors(a.descriptors, b.descriptors, mutual)
    return ransac_register(matches, a.positions, b.positions, ransac)


@dataclass
class QueryResult:
    query: int
    top1: int
    coarse_dist: float
    coarse_ok: bool
    pose: PoseSE3 | None
    inliers: int
    rte: float | None
    rre: float | None
    success: bool


@dataclass
class PoseReport:
    results: list[QueryResult]

    @property
    def coarse(self) -> list[QueryResult]:
        return [r for r in self.results if r.coarse_ok]

    @property
    def success_rate(self) -> float:
        c = self.coarse
        return float(np.mean([r.success for r in c])) if c else 0.0

    def _mean(self, attr) -> float:
        ok = [getattr(r, attr) for r in self.coarse if r.success]
        return float(np.mean(ok)) if ok else float("nan")

    @property
    def mean_rte(self) -> float:
        return self._mean("rte")

    @property
    def mean_rre(self) -> float:
        return self._mean("rre")


def localize(db: DescriptorDB, db_features: Features, query: Features, query_poses: Sequence[PoseSE3],
             k: int = 128, selection: str = "saliency", ransac: RansacConfig = RansacConfig(),
             coarse_threshold: float = 5.0, seed: int = 0) -> PoseReport:
    """Top-1 retrieval per query, then 6DoF registration against the retrieved scan.

    Queries whose top-1 candidate lies farther than ``coarse_threshold`` from
    the ground truth are reported but excluded from pose statistics. The
    ground-truth relative pose is ``P_db⁻¹ ∘ P_query``.
    """
    row_of = {e.id: i for i, e in enumerate(db.entries)}
    results = []
    for qi, (desc, kq) in enumerate(zip(query.descriptors, query.keypoints)):
        top = int(query_topk(db, desc, 1)[0])
        row = row_of[top]
        p_db = db.entries[row].pose
        dist = float(np.linalg.norm(p_db.translation - query_poses[qi].translation))
        ok = dist <= coarse_threshold
        rng = np.random.default_rng([seed, qi])
        res = register_pair(kq, db_features.keypoints[row], k, selection,
                            RansacConfig(**{**ransac.__dict__, "seed": int(rng.integers(2**31))}),
                            rng)
        gt = se3_relative(p_db, query_poses[qi])
        err = pose_errors(res.pose, gt)
        success = ok and res.success and err.success
        results.append(QueryResult(qi, top, dist, ok, res.pose if res.success else None,
                                   len(res.inliers), err.rte, err.rre, success))
    return PoseReport(results)
