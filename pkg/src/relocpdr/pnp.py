"""Camera pose from 2D-3D correspondences: six-point DLT inside RANSAC,
followed by Gauss-Newton refinement of the reprojection error."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Intrinsics

MIN_SAMPLE = 6


@dataclass(frozen=True)
class RansacParams:
    threshold_px: float = 3.0
    max_iters: int = 1000
    confidence: float = 0.99
    early_stop: int = 100
    min_consensus: int = 12
    batch: int = 16
    refine_rounds: int = 3
    lo_rounds: int = 4
    polish_iters: int = 3


@dataclass(frozen=True, eq=False)
class PnpSolution:
    R: np.ndarray  # world -> camera
    t: np.ndarray
    inliers: np.ndarray  # boolean mask over the input correspondences
    iterations: int

    @property
    def num_inliers(self) -> int:
        return int(self.inliers.sum())


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-12:
        return np.eye(3) + W
    return np.eye(3) + math.sin(theta) / theta * W + (1.0 - math.cos(theta)) / theta**2 * (W @ W)


def reprojection_errors(R, t, pts3d, pts2d, intr: Intrinsics) -> np.ndarray:
    """Pixel reprojection error per correspondence; inf behind the camera."""
    Xc = pts3d @ np.asarray(R).T + t
    z = Xc[:, 2]
    err = np.full(len(pts3d), np.inf)
    front = z > 1e-9
    px = intr.project(Xc[front])
    err[front] = np.linalg.norm(px - pts2d[front], axis=1)
    return err


def _normalize_points(X):
    c = X.mean(axis=-2, keepdims=True)
    d = np.sqrt(((X - c) ** 2).sum(axis=-1)).mean(axis=-1)
    s = np.where(d > 0, math.sqrt(3.0) / np.maximum(d, 1e-300), 1.0)
    return (X - c) * s[..., None, None], c[..., 0, :], s


def dlt_batch(X: np.ndarray, uv: np.ndarray):
    """Pose hypotheses from batches of >= 6 correspondences.

    ``X`` is (B, n, 3) world points, ``uv`` (B, n, 2) normalized image
    coordinates. Returns (R, t, ok) with R (B, 3, 3), t (B, 3).
    """
    B, n, _ = X.shape
    Xn, c, s = _normalize_points(X)
    A = np.zeros((B, 2 * n, 12))
    ones = np.ones((B, n, 1))
    Xh = np.concatenate([Xn, ones], axis=-1)
    u = uv[..., 0:1]
    v = uv[..., 1:2]
    A[:, 0::2, 0:4] = Xh
    A[:, 0::2, 8:12] = -u * Xh
    A[:, 1::2, 4:8] = Xh
    A[:, 1::2, 8:12] = -v * Xh
    _, V = np.linalg.eigh(np.swapaxes(A, 1, 2) @ A)
    P = V[:, :, 0].reshape(B, 3, 4)
    # undo point normalization: Xn = s (X - c)
    M = P[:, :, :3] * s[:, None, None]
    p4 = P[:, :, 3] - np.einsum("bij,bj->bi", M, c)
    det = np.linalg.det(M)
    sign = np.where(det < 0, -1.0, 1.0)
    M = M * sign[:, None, None]
    p4 = p4 * sign[:, None]
    U, S, Vt2 = np.linalg.svd(M)
    R = U @ Vt2
    scale = S.mean(axis=1)
    ok = (np.abs(det) > 0) & (scale > 0) & (np.linalg.det(R) > 0)
    t = p4 / np.where(scale > 0, scale, 1.0)[:, None]
    return R, t, ok


def so3_exp_batch(w: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(w, axis=1)
    W = np.zeros((len(w), 3, 3))
    W[:, 0, 1], W[:, 0, 2], W[:, 1, 2] = -w[:, 2], w[:, 1], -w[:, 0]
    W[:, 1, 0], W[:, 2, 0], W[:, 2, 1] = w[:, 2], -w[:, 1], w[:, 0]
    small = th < 1e-12
    ths = np.where(small, 1.0, th)
    a = np.where(small, 1.0, np.sin(ths) / ths)
    b = np.where(small, 0.5, (1.0 - np.cos(ths)) / ths**2)
    return np.eye(3) + a[:, None, None] * W + b[:, None, None] * (W @ W)


def polish_batch(R, t, X, uv, iters=3):
    """Batched Gauss-Newton on normalized-plane reprojection error.

    The algebraic DLT ignores rigidity and is fragile when a sample is
    nearly planar; a few rigid GN steps on the sample itself fix that.
    """
    B, n, _ = X.shape
    eye6 = 1e-12 * np.eye(6)
    R = R.copy()
    for _ in range(iters):
        Y = np.einsum("bij,bnj->bni", R, X)
        Xc = Y + t[:, None, :]
        z = Xc[..., 2]
        iz = 1.0 / np.where(np.abs(z) < 1e-9, 1e-9, z)
        x, y = Xc[..., 0] * iz, Xc[..., 1] * iz
        r = np.stack([x - uv[..., 0], y - uv[..., 1]], axis=-1).reshape(B, 2 * n)
        dpi = np.zeros((B, n, 2, 3))
        dpi[..., 0, 0] = iz
        dpi[..., 0, 2] = -x * iz
        dpi[..., 1, 1] = iz
        dpi[..., 1, 2] = -y * iz
        S = np.zeros((B, n, 3, 3))
        S[..., 0, 1], S[..., 0, 2] = Y[..., 2], -Y[..., 1]
        S[..., 1, 0], S[..., 1, 2] = -Y[..., 2], Y[..., 0]
        S[..., 2, 0], S[..., 2, 1] = Y[..., 1], -Y[..., 0]
        J = np.concatenate([dpi @ S, dpi], axis=-1).reshape(B, 2 * n, 6)
        H = np.swapaxes(J, 1, 2) @ J
        g = np.einsum("bki,bk->bi", J, r)
        bad = ~(np.isfinite(H).all(axis=(1, 2)) & np.isfinite(g).all(axis=1))
        H[bad], g[bad] = np.eye(6), 0.0
        H = H + eye6 * (1.0 + np.trace(H, axis1=1, axis2=2))[:, None, None]
        d = -np.linalg.solve(H, g[..., None])[..., 0]
        d[bad] = np.nan
        R = so3_exp_batch(d[:, :3]) @ R
        t = t + d[:, 3:]
    return R, t


def _sample_degenerate(X: np.ndarray) -> np.ndarray:
    """True for samples whose 3D points are (nearly) coplanar or collinear."""
    Xc = X - X.mean(axis=1, keepdims=True)
    sv = np.linalg.svd(Xc, compute_uv=False)
    return sv[:, 2] <= 1e-2 * np.maximum(sv[:, 0], 1e-300)


def refine_pose(R, t, pts3d, pts2d, intr: Intrinsics, iters=20):
    """Gauss-Newton on pixel reprojection error with a left so(3) update."""
    R = np.array(R, dtype=float)
    t = np.array(t, dtype=float)
    for _ in range(iters):
        Y = pts3d @ R.T
        Xc = Y + t
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        if np.any(z <= 1e-9):
            break
        res = np.column_stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy]) - pts2d
        dpi = np.zeros((len(z), 2, 3))
        dpi[:, 0, 0] = intr.fx / z
        dpi[:, 0, 2] = -intr.fx * x / z**2
        dpi[:, 1, 1] = intr.fy / z
        dpi[:, 1, 2] = -intr.fy * y / z**2
        # d(Xc)/d(omega) = -[Y]x
        dX_dw = np.zeros((len(z), 3, 3))
        dX_dw[:, 0, 1], dX_dw[:, 0, 2] = Y[:, 2], -Y[:, 1]
        dX_dw[:, 1, 0], dX_dw[:, 1, 2] = -Y[:, 2], Y[:, 0]
        dX_dw[:, 2, 0], dX_dw[:, 2, 1] = Y[:, 1], -Y[:, 0]
        J = np.concatenate([dpi @ dX_dw, dpi], axis=2).reshape(-1, 6)
        r = res.reshape(-1)
        try:
            step = np.linalg.solve(J.T @ J, -(J.T @ r))
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        R = so3_exp(step[:3]) @ R
        t = t + step[3:]
        if np.max(np.abs(step)) < 1e-13:
            break
    # re-orthonormalize against drift
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt, t


def ransac_pnp(pts3d, pts2d, intr: Intrinsics, params: RansacParams = RansacParams(), rng=None):
    """Return the best PnpSolution or None when no valid hypothesis exists."""
    rng = np.random.default_rng() if rng is None else rng
    pts3d = np.asarray(pts3d, dtype=float).reshape(-1, 3)
    pts2d = np.asarray(pts2d, dtype=float).reshape(-1, 2)
    n = len(pts3d)
    if n < MIN_SAMPLE:
        return None
    Kinv = np.linalg.inv(intr.K)
    uv = (np.column_stack([pts2d, np.ones(n)]) @ Kinv.T)[:, :2]
    tau = params.threshold_px

    best_count, best_R, best_t = 0, None, None
    needed = params.max_iters
    iters = 0
    log_fail = math.log(1.0 - params.confidence)
    rounds = 0
    while iters < min(needed, params.max_iters):
        # small first batches: a clean set is solved by its first hypotheses
        B = min(params.batch, 4 << rounds, params.max_iters - iters)
        rounds += 1
        idx = np.argsort(rng.random((B, n)), axis=1)[:, :MIN_SAMPLE]
        iters += B
        Xs = pts3d[idx]
        good = ~_sample_degenerate(Xs)
        if not good.any():
            continue
        R, t, ok = dlt_batch(Xs[good], uv[idx[good]])
        if params.polish_iters > 0 and ok.any():
            with np.errstate(all="ignore"):
                R, t = polish_batch(R[ok], t[ok], Xs[good][ok], uv[idx[good][ok]], params.polish_iters)
                ok = np.isfinite(R).all(axis=(1, 2)) & np.isfinite(t).all(axis=1)
        R, t = R[ok], t[ok]
        if len(R) == 0:
            continue
        Xc = R @ pts3d.T + t[:, :, None]
        z = Xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            du = intr.fx * Xc[:, 0] / z + intr.cx - pts2d[:, 0]
            dv = intr.fy * Xc[:, 1] / z + intr.cy - pts2d[:, 1]
            err = np.sqrt(du * du + dv * dv)
        inl = (z > 0) & (err <= tau)
        counts = inl.sum(axis=1)
        b = int(np.argmax(counts))
        if counts[b] > best_count:
            cand_R, cand_t, cand_n = R[b], t[b], int(counts[b])
            # local optimization: polish the new best on its own consensus set
            cand_mask = inl[b]
            for _ in range(params.lo_rounds):
                if cand_n < MIN_SAMPLE:
                    break
                lo_R, lo_t = refine_pose(cand_R, cand_t, pts3d[cand_mask], pts2d[cand_mask], intr, iters=5)
                lo_mask = reprojection_errors(lo_R, lo_t, pts3d, pts2d, intr) <= tau
                lo_n = int(lo_mask.sum())
                if lo_n < cand_n:
                    break
                # keep the refined pose even without new inliers: it seeds the final refinement
                grew = lo_n > cand_n
                cand_R, cand_t, cand_n, cand_mask = lo_R, lo_t, lo_n, lo_mask
                if not grew:
                    break
            best_count, best_R, best_t = cand_n, cand_R, cand_t
            w = best_count / n
            p_good = w**MIN_SAMPLE
            if p_good >= 1.0:
                needed = 0
            elif p_good > 0:
                needed = int(math.ceil(log_fail / math.log(1.0 - p_good)))
        if best_count >= params.early_stop:
            break
    if best_R is None:
        return None

    R, t = best_R, best_t
    mask = reprojection_errors(R, t, pts3d, pts2d, intr) <= tau
    for _ in range(params.refine_rounds):
        if mask.sum() < MIN_SAMPLE:
            break
        R, t = refine_pose(R, t, pts3d[mask], pts2d[mask], intr)
        new_mask = reprojection_errors(R, t, pts3d, pts2d, intr) <= tau
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    mask = reprojection_errors(R, t, pts3d, pts2d, intr) <= tau
    return PnpSolution(R, t, mask, iters)
