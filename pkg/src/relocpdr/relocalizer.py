"""Hierarchical relocalization against a FeatureMapDB.

Global-descriptor retrieval, covisibility expansion into scene clusters,
nearest-neighbour matching with a ratio test, and PnP-RANSAC.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LOCAL_DIM, FeatureMapDB, Intrinsics, Pose6, Position2, project_pose_to_xy
from .pnp import MIN_SAMPLE, RansacParams, ransac_pnp

CLUSTER_CAP = 20


@dataclass(frozen=True, eq=False)
class QueryFeatures:
    global_desc: np.ndarray
    keypoints: np.ndarray
    descriptors: np.ndarray
    intrinsics: Intrinsics = field(default_factory=Intrinsics)

    def __post_init__(self):
        object.__setattr__(self, "global_desc", np.asarray(self.global_desc, dtype=float).reshape(-1))
        kp = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "keypoints", kp)
        desc = np.asarray(self.descriptors, dtype=float)
        object.__setattr__(self, "descriptors", desc.reshape(len(kp), -1) if len(kp) else desc.reshape(0, LOCAL_DIM))

    def __len__(self):
        return len(self.keypoints)

    def __eq__(self, other):
        if not isinstance(other, QueryFeatures):
            return NotImplemented
        return (
            np.array_equal(self.global_desc, other.global_desc)
            and np.array_equal(self.keypoints, other.keypoints)
            and np.array_equal(self.descriptors, other.descriptors)
            and self.intrinsics == other.intrinsics
        )


@dataclass(frozen=True)
class SceneCluster:
    seed: int
    frame_ids: tuple
    landmark_ids: frozenset

    def __len__(self):
        return len(self.frame_ids)


@dataclass(frozen=True, eq=False)
class Correspondences:
    """2D-3D matches: query pixels, landmark ids/coords, source keypoint, best distance."""

    pts2d: np.ndarray
    landmark_ids: np.ndarray
    pts3d: np.ndarray
    query_index: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.landmark_ids)

    @classmethod
    def empty(cls) -> "Correspondences":
        return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0))

    def subset(self, mask) -> "Correspondences":
        return Correspondences(
            self.pts2d[mask], self.landmark_ids[mask], self.pts3d[mask], self.query_index[mask], self.distance[mask]
        )


@dataclass(frozen=True, eq=False)
class RelocResult:
    pose: Pose6 | None
    inliers: int
    cluster_id: int
    correspondences: Correspondences
    success: bool

    @property
    def position(self) -> Position2 | None:
        return project_pose_to_xy(self.pose) if self.pose is not None else None

    @classmethod
    def failure(cls, cluster_id=-1) -> "RelocResult":
        return cls(None, 0, cluster_id, Correspondences.empty(), False)


@dataclass(frozen=True)
class RelocConfig:
    top_k: int = 10
    num_clusters: int = 5
    cluster_cap: int = CLUSTER_CAP
    ratio: float = 0.8
    early_accept: int = 50
    ransac: RansacParams = field(default_factory=RansacParams)


def retrieve_top_k(query_gd, db: FeatureMapDB, k: int) -> np.ndarray:
    """Frame ids ordered by Euclidean descriptor distance, ties by id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(db) == 0:
        return np.zeros(0, dtype=np.int64)
    d = np.linalg.norm(db.global_matrix - np.asarray(query_gd, dtype=float), axis=1)
    order = np.lexsort((db.frame_ids, d))
    return db.frame_ids[order[:k]]


def _grow_cluster(seed: int, db: FeatureMapDB, cap: int) -> SceneCluster:
    cache = db.__dict__.setdefault("_grow_cache", {})
    key = (seed, cap)
    if key not in cache:
        neigh = sorted(db.covisibility.get(seed, ()), key=lambda f: (-db.shared_landmarks(seed, f), f))
        members = (seed, *neigh[: max(0, cap - 1)])
        lms = frozenset().union(*(db.frame_landmarks[m] for m in members))
        cache[key] = SceneCluster(seed, members, lms)
    return cache[key]


def expand_covisible_clusters(retrieved, db: FeatureMapDB, n_clusters: int, cap: int = CLUSTER_CAP):
    """Grow each retrieved frame into a scene cluster of covisible frames.

    Covisible frames are taken in decreasing order of shared landmarks (ties
    by id) until ``cap`` members, the seed included. A retrieved frame that
    already belongs to an earlier cluster is skipped. Clusters are returned
    largest first, at most ``n_clusters`` of them.
    """
    clusters = []
    absorbed = set()
    for seed in (int(r) for r in retrieved):
        if seed in absorbed:
            continue
        clusters.append(_grow_cluster(seed, db, cap))
        absorbed.update(clusters[-1].frame_ids)
    clusters.sort(key=lambda c: -len(c))
    return clusters[:n_clusters]


def passes_ratio_test(d1: float, d2: float, ratio: float) -> bool:
    if d2 <= 0:
        return False
    return d1 / d2 <= ratio


def _cluster_index(cluster: SceneCluster, db: FeatureMapDB):
    """Stacked (descriptors, landmark ids) of landmark-linked cluster keypoints, cached on the db."""
    cache = db.__dict__.setdefault("_cluster_cache", {})
    hit = cache.get(cluster.frame_ids)
    if hit is not None:
        return hit
    descs, lms = [], []
    for fid in cluster.frame_ids:
        f = db.frame(fid)
        m = f.landmark_ids >= 0
        descs.append(f.descriptors[m])
        lms.append(f.landmark_ids[m])
    if descs:
        out = (np.vstack(descs), np.concatenate(lms))
    else:
        out = (np.zeros((0, LOCAL_DIM)), np.zeros(0, dtype=np.int64))
    if len(cache) > 4096:
        cache.clear()
    cache[cluster.frame_ids] = out
    return out


def match_local_features(q: QueryFeatures, cluster: SceneCluster, db: FeatureMapDB, ratio: float = 0.8):
    """Nearest-neighbour 2D-3D matching of query keypoints against a cluster.

    Candidate keypoints are pooled over the cluster. The ratio test compares
    the nearest keypoint against the nearest keypoint of a *different*
    landmark, since the same landmark seen from several frames is not an
    ambiguity. Each landmark keeps only its closest query match.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    if len(q) == 0:
        return Correspondences.empty()
    desc, lms = _cluster_index(cluster, db)
    if len(lms) == 0:
        return Correspondences.empty()
    # unit descriptors: squared distance is 2 - 2 * similarity, so work on similarity
    sim = q.descriptors @ desc.T
    rows = np.arange(len(q))
    col = np.argmax(sim, axis=1)
    best_lm = lms[col]
    s1 = sim[rows, col]
    np.copyto(sim, -np.inf, where=lms[None, :] == best_lm[:, None])
    s2 = sim.max(axis=1)
    d1 = np.sqrt(np.maximum(2.0 - 2.0 * s1, 0.0))
    d2nd = np.sqrt(np.maximum(2.0 - 2.0 * s2, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (d2nd > 0) & (d1 <= ratio * d2nd)
    qi = np.flatnonzero(ok)
    lm = best_lm[qi]
    dist = d1[qi]
    # one query keypoint per landmark: keep the smallest distance
    keep = np.lexsort((qi, dist))
    _, first = np.unique(lm[keep], return_index=True)
    sel = np.sort(keep[first])
    qi, lm, dist = qi[sel], lm[sel], dist[sel]
    pts3d = np.array([db.landmarks[int(j)] for j in lm]).reshape(-1, 3)
    return Correspondences(q.keypoints[qi], lm.astype(np.int64), pts3d, qi.astype(np.int64), dist)


def solve_pnp_ransac(corrs: Correspondences, intrinsics: Intrinsics, params: RansacParams = RansacParams(), rng=None, cluster_id=-1) -> RelocResult:
    if len(corrs) < MIN_SAMPLE:
        return RelocResult.failure(cluster_id)
    sol = ransac_pnp(corrs.pts3d, corrs.pts2d, intrinsics, params, rng)
    if sol is None:
        return RelocResult.failure(cluster_id)
    M = sol.num_inliers
    pose = Pose6.from_world_to_camera(sol.R, sol.t)
    return RelocResult(pose, M, cluster_id, corrs.subset(sol.inliers), M >= params.min_consensus)


def relocalize(q: QueryFeatures, db: FeatureMapDB, cfg: RelocConfig = RelocConfig(), rng=None) -> RelocResult:
    """Run retrieval, clustering, matching and PnP; stop at the first strong cluster."""
    rng = np.random.default_rng() if rng is None else rng
    if len(db) == 0 or len(q) == 0:
        return RelocResult.failure()
    retrieved = retrieve_top_k(q.global_desc, db, cfg.top_k)
    if len(retrieved) == 0:
        return RelocResult.failure()
    best = None
    for cluster in expand_covisible_clusters(retrieved, db, cfg.num_clusters, cfg.cluster_cap):
        corrs = match_local_features(q, cluster, db, cfg.ratio)
        # M can never exceed the correspondence count: skip clusters that cannot win
        if len(corrs) < cfg.ransac.min_consensus or (best is not None and len(corrs) <= best.inliers):
            if best is None:
                best = RelocResult.failure(cluster.seed)
            continue
        res = solve_pnp_ransac(corrs, db.intrinsics, cfg.ransac, rng, cluster.seed)
        if best is None or res.inliers > best.inliers:
            best = res
        if res.inliers >= cfg.early_accept:
            break
    return best if best is not None else RelocResult.failure()
