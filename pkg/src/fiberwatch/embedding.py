"""Feature-space analysis: PCA, exact t-SNE, cluster centers, spanning tree.

The t-SNE here is the exact O(N^2) formulation: per-point Gaussian
bandwidths tuned by bisection to a target perplexity, symmetrized
affinities, Student-t low-dimensional kernel, gradient descent with early
exaggeration and a momentum switch.  A step-halving safeguard keeps the
KL divergence non-increasing once exaggeration ends, which makes the
objective's descent assertable in tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import CLASS_COUNT
from .errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class EmbeddingConfig:
    pca_components: int = 64
    dims: int = 3
    perplexity: float = 30.0
    iterations: int = 1000
    exaggeration: float = 4.0
    exaggeration_iters: int = 100
    learning_rate: float = 100.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ConfigurationError("embedding dims must be 2 or 3")
        if self.perplexity <= 1:
            raise ConfigurationError("perplexity must exceed 1")


@dataclass
class PcaResult:
    projection: np.ndarray       # (N, k)
    basis: np.ndarray            # (k, D), orthonormal rows
    explained_variance: np.ndarray
    mean: np.ndarray
    effective_rank: int


def pca(data: np.ndarray, n_components: int) -> PcaResult:
    """Mean-centered projection onto the top principal directions."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < n_components:
        raise ConfigurationError("need at least as many samples as components")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("PCA input must be finite")
    mean = x.mean(axis=0)
    centered = x - mean
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0
    k = min(n_components, vt.shape[0])
    basis = vt[:k]
    return PcaResult(centered @ basis.T, basis,
                     (s[:k] ** 2) / max(x.shape[0] - 1, 1), mean,
                     effective_rank=min(rank, k))


def _sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x ** 2, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_affinity(dist_row: np.ndarray, beta: float):
    """Conditional affinities and natural-log entropy for one precision."""
    p = np.exp(-dist_row * beta)
    total = p.sum()
    if total <= 0:
        return np.zeros_like(p), 0.0
    p /= total
    nz = p > 0
    h = float(-(p[nz] * np.log(p[nz])).sum())
    return p, h


def conditional_affinities(dists: np.ndarray, perplexity: float,
                           tol: float = 1e-3, max_iter: int = 80):
    """Bisection per point until entropy matches log(perplexity) within tol.

    Returns the conditional matrix (rows sum to 1, zero diagonal) and the
    per-point precisions.
    """
    n = dists.shape[0]
    target = np.log(perplexity)
    p_cond = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        row = np.delete(dists[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        p, h = _row_affinity(row, beta)
        for _ in range(max_iter):
            if abs(h - target) <= tol:
                break
            if h > target:          # entropy too high -> sharpen
                lo = beta
                beta = beta * 2.0 if not np.isfinite(hi) else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
            p, h = _row_affinity(row, beta)
        betas[i] = beta
        p_cond[i, np.arange(n) != i] = p
    return p_cond, betas


def joint_affinities(p_cond: np.ndarray) -> np.ndarray:
    n = p_cond.shape[0]
    p = (p_cond + p_cond.T) / (2.0 * n)
    return p


def _q_matrix(y: np.ndarray):
    num = 1.0 / (1.0 + _sq_dists(y))
    np.fill_diagonal(num, 0.0)
    total = num.sum()
    return num / total, num


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    q, _ = _q_matrix(y)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-12))))


def _tsne_gradient(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    q, num = _q_matrix(y)
    w = (p - q) * num
    return 4.0 * ((np.diag(w.sum(axis=1)) - w) @ y)


def tsne(points: np.ndarray, cfg: EmbeddingConfig, kl_trace: list | None = None) -> np.ndarray:
    """Embed points into cfg.dims dimensions; deterministic given cfg.seed.

    When ``kl_trace`` is a list, the accepted KL value of every
    post-exaggeration step is appended to it.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if n < 3 * cfg.perplexity:
        raise ConfigurationError("sample count must be at least 3x perplexity")
    rng = np.random.default_rng([cfg.seed, 0x75E3])
    dists = _sq_dists(x)
    off_diag = dists + np.diag(np.full(n, np.inf))
    if np.any(off_diag == 0.0):
        warnings.warn("duplicate points: adding seeded jitter", stacklevel=2)
        x = x + rng.normal(0.0, 1e-8 * (1.0 + x.std()), x.shape)
        dists = _sq_dists(x)
    p_cond, _ = conditional_affinities(dists, cfg.perplexity)
    p = joint_affinities(p_cond)

    y = rng.normal(0.0, 1e-4, (n, cfg.dims))
    vel = np.zeros_like(y)
    kl_prev = None
    for it in range(cfg.iterations):
        exag = it < cfg.exaggeration_iters
        p_eff = p * cfg.exaggeration if exag else p
        momentum = cfg.momentum_early if it < cfg.momentum_switch else cfg.momentum_late
        grad = _tsne_gradient(p_eff, y)
        if exag:
            vel = momentum * vel - cfg.learning_rate * grad
            y = y + vel
            continue
        if kl_prev is None:
            kl_prev = kl_divergence(p, y)
        raw = momentum * vel - cfg.learning_rate * grad
        scale = 1.0
        for attempt in range(40):
            kl_new = kl_divergence(p, y + scale * raw)
            if kl_new <= kl_prev + 1e-12:
                break
            if attempt == 19:
                # momentum may point uphill; fall back to pure gradient
                raw = -cfg.learning_rate * grad
                scale = 1.0
                continue
            scale *= 0.5
        else:
            kl_new = kl_prev
            scale = 0.0
        vel = scale * raw
        y = y + vel
        kl_prev = kl_new
        if kl_trace is not None:
            kl_trace.append(kl_new)
    return y - y.mean(axis=0)


@dataclass
class ClusterCenters:
    points: np.ndarray           # (CLASS_COUNT, dims), coordinatewise medians


def median_centers(embedded: np.ndarray, labels: np.ndarray) -> ClusterCenters:
    y = np.asarray(embedded, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    centers = np.empty((CLASS_COUNT, y.shape[1]))
    for c in range(CLASS_COUNT):
        mask = lab == c
        if not np.any(mask):
            raise ConfigurationError(f"class {c} has no points")
        centers[c] = np.median(y[mask], axis=0)
    return ClusterCenters(centers)


@dataclass
class DistanceMatrix:
    values: np.ndarray           # (C, C) symmetric, zero diagonal, max = 1


def center_distances(centers: ClusterCenters) -> DistanceMatrix:
    """Pairwise Euclidean distances, normalized so the largest entry is 1."""
    pts = centers.points
    d = np.sqrt(_sq_dists(pts))
    peak = d.max()
    if peak <= 0:
        raise NumericError("all cluster centers coincide; distances degenerate")
    return DistanceMatrix(d / peak)


@dataclass
class MstEdges:
    edges: list[tuple[int, int, float]]     # (i, j, weight), i < j
    total_weight: float


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def mst(matrix: DistanceMatrix | np.ndarray) -> MstEdges:
    """Kruskal over a symmetric distance matrix; lexicographic tie-break."""
    d = np.asarray(getattr(matrix, "values", matrix), dtype=np.float64)
    n = d.shape[0]
    if not np.allclose(d, d.T):
        raise ConfigurationError("distance matrix must be symmetric")
    if not np.all(np.isfinite(d)):
        raise NumericError("non-finite distances: graph is disconnected")
    candidates = sorted((float(d[i, j]), i, j)
                        for i in range(n) for j in range(i + 1, n))
    uf = _UnionFind(n)
    edges = []
    for w, i, j in candidates:
        if uf.union(i, j):
            edges.append((i, j, w))
            if len(edges) == n - 1:
                break
    if len(edges) != n - 1:
        raise NumericError("graph is disconnected; no spanning tree")
    return MstEdges(edges, float(sum(e[2] for e in edges)))
