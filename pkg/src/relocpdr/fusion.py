"""Robust pose-graph fusion of PDR increments and relocalization fixes.

The state is the 2D position of every step node (node 0 is the start).
PDR factors tie consecutive nodes, relocalization factors and the prior
pin single nodes. Every factor is linear in the state, so Gauss-Newton
reduces to iteratively reweighted least squares where only the Tukey
weights of relocalization factors change between iterations.

The normal equations of a chain are block tridiagonal. ``optimize_batch``
assembles them in banded form and hands them to LAPACK; the incremental
solver keeps a block-Thomas factorization and only refactors the suffix
touched by new factors or changed weights.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

from .core import DEFAULT_GATE, Position2, RelocObservation, StepEvent

log = logging.getLogger(__name__)

TUKEY_DELTA = 4.685


class FusionError(RuntimeError):
    pass


# -- robust kernel -------------------------------------------------------------


def tukey_rho(x, delta: float = TUKEY_DELTA):
    """Tukey biweight loss on a non-negative residual norm."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    c = delta * delta / 6.0
    if isinstance(x, (float, int)) or np.ndim(x) == 0:
        x = abs(float(x))
        if x >= delta:
            return c
        u = 1.0 - (x / delta) ** 2
        return c * (1.0 - u * u * u)
    x = np.abs(np.asarray(x, dtype=float))
    u = 1.0 - (np.minimum(x, delta) / delta) ** 2
    return np.where(x >= delta, c, c * (1.0 - u * u * u))


def tukey_weight(x, delta: float = TUKEY_DELTA):
    """IRLS weight rho'(x)/x; exactly zero beyond delta."""
    if isinstance(x, (float, int)) or np.ndim(x) == 0:
        x = abs(float(x))
        if x >= delta:
            return 0.0
        u = 1.0 - (x / delta) ** 2
        return u * u
    x = np.abs(np.asarray(x, dtype=float))
    u = 1.0 - (np.minimum(x, delta) / delta) ** 2
    return np.where(x >= delta, 0.0, u * u)


@dataclass(frozen=True)
class RobustKernel:
    kind: str = "tukey"
    delta: float = TUKEY_DELTA

    def __post_init__(self):
        if self.kind not in ("tukey", "none"):
            raise ValueError(f"unknown kernel '{self.kind}'")
        if self.kind == "tukey" and not self.delta > 0:
            raise ValueError("tukey kernel needs delta > 0")

    def rho(self, e: float) -> float:
        return tukey_rho(e, self.delta) if self.kind == "tukey" else 0.5 * e * e

    def weight(self, e: float) -> float:
        return tukey_weight(e, self.delta) if self.kind == "tukey" else 1.0


# -- factors -------------------------------------------------------------------


def reloc_covariance(M: int, sigma_base: float = 0.3, m_ref: float = 100.0) -> np.ndarray:
    """Isotropic covariance shrinking with the inlier count, clamped at sigma_base."""
    if M <= 0:
        raise ValueError("inlier count must be positive")
    sigma = sigma_base * max(1.0, m_ref / M)
    return sigma * sigma * np.eye(2)


def residual_pdr(z, x_prev, x_cur) -> np.ndarray:
    return np.asarray(z, dtype=float) - (np.asarray(x_cur, dtype=float) - np.asarray(x_prev, dtype=float))


def residual_reloc(z, x) -> np.ndarray:
    return np.asarray(z, dtype=float) - np.asarray(x, dtype=float)


def jacobians_pdr():
    """(d r/d x_prev, d r/d x_cur)."""
    return np.eye(2), -np.eye(2)


def jacobian_reloc():
    return -np.eye(2)


def _info(cov) -> tuple:
    cov = np.asarray(cov, dtype=float).reshape(2, 2)
    if not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) <= 0):
        raise ValueError("covariance must be symmetric positive definite")
    L = np.linalg.inv(cov)
    L = 0.5 * (L + L.T)
    return (float(L[0, 0]), float(L[0, 1]), float(L[1, 0]), float(L[1, 1]))


@dataclass(frozen=True, eq=False)
class PdrFactor:
    k: int  # connects k-1 -> k
    z: tuple
    cov: np.ndarray
    info: tuple


@dataclass(frozen=True, eq=False)
class UnaryFactor:
    """Prior or relocalization fix on node k."""

    k: int
    z: tuple
    cov: np.ndarray
    info: tuple
    inliers: int = 0
    robust: bool = True


@dataclass
class StateNode:
    k: int
    estimate: Position2


@dataclass(frozen=True)
class FusionConfig:
    sigma_pdr: float = 0.05
    sigma_prior: float = 0.05
    sigma_base: float = 0.3
    m_ref: float = 100.0
    gate: int = DEFAULT_GATE
    kernel: RobustKernel = field(default_factory=RobustKernel)
    relin_threshold: float = 1e-3
    max_iters: int = 50
    tol: float = 1e-8
    weight_tol: float = 1e-7
    wildfire_tol: float = 1e-10


# -- 2x2 helpers on row-major 4-tuples -----------------------------------------


def _mv(A, v):
    return (A[0] * v[0] + A[1] * v[1], A[2] * v[0] + A[3] * v[1])


def _quad(L, r) -> float:
    return r[0] * (L[0] * r[0] + L[1] * r[1]) + r[1] * (L[2] * r[0] + L[3] * r[1])


# -- graph ---------------------------------------------------------------------


class FusionGraph:
    """Step-indexed position nodes with PDR, prior and relocalization factors."""

    def __init__(self, config: FusionConfig = FusionConfig(), start=(0.0, 0.0)):
        self.config = config
        self.x = [[float(start[0]), float(start[1])]]
        self.pdr = [None]  # pdr[k] links k-1 -> k
        self.prior: UnaryFactor | None = None
        self.relocs: list[UnaryFactor] = []
        self.weights: list[float] = []
        # per relocalization factor: node, node estimate when its weight was
        # computed, and a bound on |dw| per metre of node motion (max-norm)
        self._rk = np.zeros(0, dtype=np.int64)
        self._rz = np.zeros((0, 2))  # fix positions and information, for vectorized cost
        self._rinfo = np.zeros((0, 4))
        self._lin = np.zeros((0, 2))
        self._lip = np.zeros(0)
        self._unary = {}  # node -> indices into relocs
        # block-Thomas cache: g_i = S_i^-1 c_i, G_i = S_i^-1 E_i
        self._g = []
        self._G = []
        self._dirty = 0
        self._sys = {}  # node -> (D_i, y_i) under self.weights
        self._base = {}  # node -> PDR and prior part of (D_i, y_i), weight independent
        self._rterm = []  # per relocalization factor: (L, L z) flattened
        self.n_optimized = 0  # nodes [0, n_optimized) reflect the last solve
        self.solver_log = []

    # structure

    @property
    def num_nodes(self) -> int:
        return len(self.x)

    @property
    def num_steps(self) -> int:
        return len(self.x) - 1

    @property
    def nodes(self):
        return [StateNode(k, Position2(*p)) for k, p in enumerate(self.x)]

    @property
    def num_factors(self) -> int:
        return self.num_steps + len(self.relocs) + (self.prior is not None)

    def estimates(self) -> np.ndarray:
        return np.array(self.x, dtype=float).reshape(-1, 2)

    def copy(self) -> "FusionGraph":
        return copy.deepcopy(self)

    def _touch(self, k: int, *changed):
        self._dirty = k if self._dirty is None else min(self._dirty, k)
        for i in changed or (k,):
            self._sys.pop(i, None)

    def add_step(self, step: StepEvent, cov=None) -> int:
        k = self.num_nodes
        if step.index != k:
            raise FusionError(f"step index {step.index} does not follow node {k - 1}")
        if cov is None:
            cov = self.config.sigma_pdr**2 * np.eye(2)
        z = (step.length * math.cos(step.heading), step.length * math.sin(step.heading))
        self.pdr.append(PdrFactor(k, z, np.asarray(cov, dtype=float), _info(cov)))
        px, py = self.x[-1]
        self.x.append([px + z[0], py + z[1]])
        self._base.pop(k - 1, None)
        self._touch(k - 1, k - 1, k)
        return k

    def add_prior(self, k: int, z, sigma: float | None = None, shift: bool = True):
        """Anchor node ``k`` at ``z``. With ``shift`` the current estimates are
        translated so that node ``k`` already sits on the prior."""
        if self.prior is not None:
            raise FusionError("graph already has a prior")
        self._check_node(k)
        sigma = self.config.sigma_prior if sigma is None else sigma
        cov = sigma * sigma * np.eye(2)
        z = (float(z[0]), float(z[1]))
        self.prior = UnaryFactor(k, z, cov, _info(cov), robust=False)
        if shift:
            dx, dy = z[0] - self.x[k][0], z[1] - self.x[k][1]
            for p in self.x:
                p[0] += dx
                p[1] += dy
            self._lin = self._lin + (dx, dy)
        self._base.pop(k, None)
        self._touch(0, k)

    def _check_node(self, k: int):
        if not 0 <= k < self.num_nodes:
            raise FusionError(f"unknown node {k}")

    def gate_and_add_reloc(self, obs: RelocObservation, gate: int | None = None) -> bool:
        """Attach a relocalization factor iff its inlier count exceeds the gate."""
        self._check_node(obs.k)
        gate = self.config.gate if gate is None else gate
        if not obs.inliers > gate:
            return False
        cov = reloc_covariance(obs.inliers, self.config.sigma_base, self.config.m_ref)
        f = UnaryFactor(obs.k, (float(obs.position[0]), float(obs.position[1])), cov, _info(cov), obs.inliers)
        self._unary.setdefault(obs.k, []).append(len(self.relocs))
        self.relocs.append(f)
        L = f.info
        self._rterm.append((*L, L[0] * f.z[0] + L[1] * f.z[1], L[2] * f.z[0] + L[3] * f.z[1]))
        w, _ = self._weight_at(f, self.x[obs.k])
        self.weights.append(w)
        self._rk = np.append(self._rk, obs.k)
        self._rz = np.vstack([self._rz, f.z])
        self._rinfo = np.vstack([self._rinfo, f.info])
        self._lin = np.vstack([self._lin, self.x[obs.k]])
        self._lip = np.append(self._lip, self._weight_lipschitz(f))
        self._touch(obs.k)
        return True

    # cost and weights

    def _whitened(self, f: UnaryFactor, p) -> float:
        r = (f.z[0] - p[0], f.z[1] - p[1])
        return math.sqrt(max(_quad(f.info, r), 0.0))

    def _weight_lipschitz(self, f: UnaryFactor) -> float:
        kern = self.config.kernel
        if kern.kind != "tukey":
            return 0.0
        # max |dw/de| = 8 / (3 sqrt(3) delta); |de| <= sqrt(lambda_max) * sqrt(2) * max|dx|
        lam = float(np.linalg.eigvalsh(np.array(f.info).reshape(2, 2)).max())
        return 8.0 / (3.0 * math.sqrt(3.0) * kern.delta) * math.sqrt(2.0 * lam)

    def _weight_at(self, f: UnaryFactor, p):
        e = self._whitened(f, p)
        return self.config.kernel.weight(e), e

    def cost(self, x=None) -> float:
        x = np.asarray(self.x if x is None else x, dtype=float).reshape(-1, 2)
        total = 0.0
        if len(x) > 1:
            z = np.array([f.z for f in self.pdr[1 : len(x)]], dtype=float)
            L = np.array([f.info for f in self.pdr[1 : len(x)]], dtype=float)
            r = z - np.diff(x, axis=0)
            total += 0.5 * float(np.sum(r[:, 0] * (L[:, 0] * r[:, 0] + L[:, 1] * r[:, 1])
                                        + r[:, 1] * (L[:, 2] * r[:, 0] + L[:, 3] * r[:, 1])))
        if self.prior is not None:
            p = x[self.prior.k]
            r = (self.prior.z[0] - p[0], self.prior.z[1] - p[1])
            total += 0.5 * _quad(self.prior.info, r)
        if self.relocs:
            r = self._rz - x[self._rk]
            L = self._rinfo
            q = r[:, 0] * (L[:, 0] * r[:, 0] + L[:, 1] * r[:, 1]) + r[:, 1] * (L[:, 2] * r[:, 0] + L[:, 3] * r[:, 1])
            e = np.sqrt(np.maximum(q, 0.0))
            kern = self.config.kernel
            total += float(np.sum(tukey_rho(e, kern.delta) if kern.kind == "tukey" else 0.5 * e * e))
        return total

    def gradient(self, x=None) -> np.ndarray:
        """Gradient of the cost with respect to all node positions."""
        x = self.estimates() if x is None else np.asarray(x, dtype=float).reshape(-1, 2)
        g = np.zeros_like(x)
        for k in range(1, len(x)):
            f = self.pdr[k]
            L = np.array(f.info).reshape(2, 2)
            r = residual_pdr(f.z, x[k - 1], x[k])
            g[k - 1] += L @ r
            g[k] -= L @ r
        unary = ([(self.prior, 1.0)] if self.prior is not None else []) + [
            (f, self.config.kernel.weight(self._whitened(f, x[f.k]))) for f in self.relocs
        ]
        for f, w in unary:
            L = np.array(f.info).reshape(2, 2)
            g[f.k] -= w * (L @ residual_reloc(f.z, x[f.k]))
        return g

    # assembly

    def _base_system(self, i: int):
        """PDR and prior contributions to D_i and y_i."""
        a = b = c = d = u = v = 0.0
        if i >= 1:
            f = self.pdr[i]
            L0, L1, L2, L3 = f.info
            z0, z1 = f.z
            a, b, c, d = L0, L1, L2, L3
            u, v = L0 * z0 + L1 * z1, L2 * z0 + L3 * z1
        if i + 1 < len(self.x):
            f = self.pdr[i + 1]
            L0, L1, L2, L3 = f.info
            z0, z1 = f.z
            a, b, c, d = a + L0, b + L1, c + L2, d + L3
            u, v = u - (L0 * z0 + L1 * z1), v - (L2 * z0 + L3 * z1)
        if self.prior is not None and self.prior.k == i:
            L0, L1, L2, L3 = self.prior.info
            z0, z1 = self.prior.z
            a, b, c, d = a + L0, b + L1, c + L2, d + L3
            u, v = u + (L0 * z0 + L1 * z1), v + (L2 * z0 + L3 * z1)
        return a, b, c, d, u, v

    def _node_system(self, i: int, weights):
        """Diagonal block D_i and right-hand side y_i of node i."""
        base = self._base.get(i)
        if base is None:
            base = self._base[i] = self._base_system(i)
        a, b, c, d, u, v = base
        rterm = self._rterm
        for j in self._unary.get(i, ()):
            w = weights[j]
            if w == 0.0:
                continue
            L0, L1, L2, L3, y0, y1 = rterm[j]
            a, b, c, d = a + w * L0, b + w * L1, c + w * L2, d + w * L3
            u, v = u + w * y0, v + w * y1
        return (a, b, c, d), (u, v)

    def _offdiag(self, i: int):
        """E_i couples node i with node i+1."""
        L = self.pdr[i + 1].info
        return (-L[0], -L[1], -L[2], -L[3])

    def _banded(self, weights):
        n = self.num_nodes
        ab = np.zeros((4, 2 * n))
        rhs = np.zeros(2 * n)
        for i in range(n):
            D, y = self._node_system(i, weights)
            ab[0, 2 * i], ab[1, 2 * i], ab[0, 2 * i + 1] = D[0], D[2], D[3]
            rhs[2 * i], rhs[2 * i + 1] = y
            if i + 1 < n:
                E = self._offdiag(i)
                # lower band: ab[r - c, c] = A[r, c]; rows of node i+1, cols of node i
                ab[2, 2 * i] = E[0]
                ab[3, 2 * i] = E[1]
                ab[1, 2 * i + 1] = E[2]
                ab[2, 2 * i + 1] = E[3]
        return ab, rhs

    def _current_weights(self):
        return [self._weight_at(f, self.x[f.k])[0] for f in self.relocs]

    def _require_prior(self):
        if self.prior is None:
            raise FusionError("a prior factor is required before optimizing")

    # solvers

    def optimize_batch(self) -> np.ndarray:
        """Full IRLS from the current estimates with a banded Cholesky solve."""
        self._require_prior()
        before = self.estimates()
        it = 0
        for it in range(1, self.config.max_iters + 1):
            weights = self._current_weights()
            ab, rhs = self._banded(weights)
            try:
                sol = solveh_banded(ab, rhs, lower=True, check_finite=True)
            except np.linalg.LinAlgError:
                self._factor_from(0, weights)  # raises with the offending node
                raise
            new = sol.reshape(-1, 2)
            delta = float(np.max(np.abs(new - self.estimates()))) if len(new) else 0.0
            self.x = new.tolist()
            if delta < self.config.tol:
                break
        self.weights = self._current_weights()
        self._lin = np.array([self.x[k] for k in self._rk.tolist()], dtype=float).reshape(-1, 2)
        self._g, self._G = [], []
        self._sys = {}
        self._dirty = 0
        self.n_optimized = self.num_nodes
        moved = np.max(np.abs(self.estimates() - before), axis=1) if len(before) else np.zeros(0)
        self._log("batch", it, int(np.sum(moved > self.config.relin_threshold)))
        return self.estimates()

    def _factor_from(self, start: int, weights):
        """Refactor nodes start..n-1 (forward elimination of the block chain)."""
        n = self.num_nodes
        del self._g[start:]
        del self._G[start:]
        cache = self._sys if weights is self.weights else {}
        g_out, G_out = self._g, self._G
        pdr = self.pdr
        for i in range(start, n):
            sysi = cache.get(i)
            if sysi is None:
                sysi = self._node_system(i, weights)
                if weights is self.weights:
                    cache[i] = sysi
            (a, b, c, d), (u, v) = sysi
            if i > 0:
                # E_{i-1} = -L, with L the information of the factor i-1 -> i
                L0, L1, L2, L3 = pdr[i].info
                G0, G1, G2, G3 = G_out[i - 1]
                p0, p1 = g_out[i - 1]
                a += L0 * G0 + L2 * G2
                b += L0 * G1 + L2 * G3
                c += L1 * G0 + L3 * G2
                d += L1 * G1 + L3 * G3
                u += L0 * p0 + L2 * p1
                v += L1 * p0 + L3 * p1
            det = a * d - b * c
            if not (det > 0.0 and a > 0.0) or not math.isfinite(det):
                j = self._segment_start(i)
                raise FusionError(
                    f"singular normal equations at node {j}: nodes {j}..{i} are not anchored by any prior or fix"
                )
            i0, i1, i2, i3 = d / det, -b / det, -c / det, a / det
            g_out.append((i0 * u + i1 * v, i2 * u + i3 * v))
            if i + 1 < n:
                M0, M1, M2, M3 = pdr[i + 1].info
                # S^-1 E_i with E_i = -M
                G_out.append((
                    -(i0 * M0 + i1 * M2), -(i0 * M1 + i1 * M3),
                    -(i2 * M0 + i3 * M2), -(i2 * M1 + i3 * M3),
                ))
            else:
                G_out.append((0.0, 0.0, 0.0, 0.0))

    def _segment_start(self, i: int) -> int:
        """First node of the chain segment ending at ``i`` (PDR links with zero information cut it)."""
        while i > 0 and any(self.pdr[i].info):
            i -= 1
        return i

    def _back_substitute(self, start: int):
        """Solve nodes n-1..start exactly, then push the change at ``start``
        further down only while it stays above the wildfire tolerance."""
        n = self.num_nodes
        x = self.x
        nxt = None
        old_start = tuple(x[start])
        g_all, G_all = self._g, self._G
        for i in range(n - 1, start - 1, -1):
            g0, g1 = g_all[i]
            if nxt is None:
                x[i] = [g0, g1]
            else:
                G0, G1, G2, G3 = G_all[i]
                n0, n1 = nxt
                x[i] = [g0 - (G0 * n0 + G1 * n1), g1 - (G2 * n0 + G3 * n1)]
            nxt = x[i]
        d = (x[start][0] - old_start[0], x[start][1] - old_start[1])
        lowest = start
        for i in range(start - 1, -1, -1):
            if max(abs(d[0]), abs(d[1])) < self.config.wildfire_tol:
                break
            Gd = _mv(self._G[i], d)
            d = (-Gd[0], -Gd[1])
            x[i][0] += d[0]
            x[i][1] += d[1]
            lowest = i
        return lowest

    def _weight_candidates(self, stale):
        """Relocalization factors whose weight may have changed, their node
        positions and how far the node moved since the weight was computed.

        Others are skipped: their node moved too little for the weight to
        shift by more than the tolerance.
        """
        sel = np.flatnonzero(self._rk >= stale)
        xs = np.array([self.x[k] for k in self._rk[sel].tolist()], dtype=float).reshape(-1, 2)
        moved = np.abs(xs - self._lin[sel]).max(axis=1, initial=0.0)
        hit = moved * self._lip[sel] > self.config.weight_tol
        return sel[hit], xs[hit], moved[hit]

    def _weights_for(self, idx, xs):
        """IRLS weights of relocalization factors ``idx`` at node positions ``xs``."""
        kern = self.config.kernel
        if kern.kind != "tukey":
            return np.ones(len(idx))
        r = self._rz[idx] - xs
        L = self._rinfo[idx]
        q = r[:, 0] * (L[:, 0] * r[:, 0] + L[:, 1] * r[:, 1]) + r[:, 1] * (L[:, 2] * r[:, 0] + L[:, 3] * r[:, 1])
        return tukey_weight(np.sqrt(np.maximum(q, 0.0)), kern.delta)

    def optimize_incremental(self) -> np.ndarray:
        """Update only the part of the solution touched since the last solve.

        New factors mark the lowest node whose block changed; the cached
        factorization is redone from there and the correction is propagated
        back only as far as it is numerically visible. Relocalization weights
        are relinearized where their node moved more than the threshold. A
        last pass re-checks every weight against the final estimates so the
        result is a fixed point of the batch iteration.
        """
        self._require_prior()
        cfg = self.config
        before = np.array(self.x[: self.n_optimized], dtype=float).reshape(-1, 2)
        new_nodes = self.num_nodes - self.n_optimized
        iters = 0
        exact_pass = False
        # weights can only be stale on nodes that moved since they were computed
        stale = self.num_nodes if self._dirty is None else self._dirty
        while iters < cfg.max_iters:
            if self._dirty is not None:
                start = min(self._dirty, len(self._g))
                self._factor_from(start, self.weights)
                stale = min(stale, self._back_substitute(start))
                self._dirty = None
                iters += 1
            idx, xs, moved = self._weight_candidates(stale)
            due = np.ones(len(idx), dtype=bool) if exact_pass else moved > cfg.relin_threshold
            pending = not due.all()
            idx, xs = idx[due], xs[due]
            if len(idx):
                w = self._weights_for(idx, xs)
                self._lin[idx] = xs
                old = np.array([self.weights[j] for j in idx.tolist()])
                changed = np.abs(w - old) > cfg.weight_tol
                for j, wj in zip(idx[changed].tolist(), w[changed].tolist()):
                    self.weights[j] = wj
                    k = int(self._rk[j])
                    self._touch(k, k)
            if self._dirty is None:
                if exact_pass or not pending:
                    break
                exact_pass = True
            else:
                exact_pass = False
        self.n_optimized = self.num_nodes
        now = np.array(self.x[: len(before)], dtype=float).reshape(-1, 2)
        moved = int(np.sum(np.abs(now - before).max(axis=1, initial=0.0) > cfg.relin_threshold))
        self._log("incremental", iters, moved + new_nodes)
        return self.estimates()

    def _log(self, kind, iters, affected):
        rec = {
            "update": len(self.solver_log),
            "solver": kind,
            "iterations": int(iters),
            "cost": float(self.cost()),
            "affected": int(affected),
            "nodes": self.num_nodes,
            "relocs": len(self.relocs),
        }
        self.solver_log.append(rec)
        log.debug("solve %s", rec)

    # output

    def current_trajectory(self, include_start: bool = False) -> np.ndarray:
        """Optimized positions, dead-reckoned forward past the last solve."""
        if self.num_steps == 0 and not include_start:
            return np.zeros((0, 2))
        out = [list(p) for p in self.x]
        last = max(self.n_optimized, 1)
        for k in range(last, self.num_nodes):
            z = self.pdr[k].z
            out[k] = [out[k - 1][0] + z[0], out[k - 1][1] + z[1]]
        arr = np.array(out, dtype=float).reshape(-1, 2)
        return arr if include_start else arr[1:]
