"""Diffusion maps and two-view (bipartite) diffusion fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.spatial.distance
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, svds

from .errors import DegenerateCloud, EigenFailure, SizeMismatch

log = logging.getLogger(__name__)

EXACT_PERCENTILE_MAX_J = 20_000
SAMPLED_PAIRS = 10_000_000
DENSE_EIGEN_MAX_J = 2_000


@dataclass(frozen=True)
class AffinityGraph:
    """Symmetric affinity ``W(i, j) = exp(-|u_i - u_j| / epsilon)``.

    ``W`` is a dense array, or a CSR matrix when the graph was sparsified to
    its symmetrised k nearest neighbours.
    """

    W: np.ndarray | sp.csr_matrix
    epsilon: float
    percentile: float

    @property
    def J(self) -> int:
        return self.W.shape[0]

    @property
    def sparse(self) -> bool:
        return sp.issparse(self.W)

    def degrees(self) -> np.ndarray:
        return np.asarray(self.W.sum(axis=1)).ravel()

    def transition(self) -> np.ndarray:
        """Dense ``D^-1 W``; only meant for small graphs."""
        W = self.W.toarray() if self.sparse else self.W
        return W / W.sum(axis=1, keepdims=True)


def _sq_norms(X: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", X, X)


def _distance_block(X: np.ndarray, rows: slice, sq: np.ndarray) -> np.ndarray:
    d2 = sq[rows, None] + sq[None, :] - 2.0 * (X[rows] @ X.T)
    return np.sqrt(np.maximum(d2, 0.0))


def distance_percentile(X: np.ndarray, percentile: float, seed: int = 0) -> float:
    """``percentile`` (a fraction) of the ``J(J-1)/2`` pairwise Euclidean distances.

    Linear interpolation between order statistics, as ``numpy.quantile``.
    Above ``EXACT_PERCENTILE_MAX_J`` points the quantile is taken over a
    uniform sample of ``SAMPLED_PAIRS`` pairs.
    """
    X = np.asarray(X, dtype=np.float64)
    J = len(X)
    if J <= EXACT_PERCENTILE_MAX_J:
        if J <= 4000:
            diff = scipy.spatial.distance.pdist(X)
        else:
            sq = _sq_norms(X)
            diff = np.empty(J * (J - 1) // 2, dtype=np.float32)
            pos = 0
            step = max(1, 2_000_000 // J)
            for start in range(0, J - 1, step):
                block = _distance_block(X, slice(start, min(start + step, J - 1)), sq)
                for r, row in enumerate(block):
                    i = start + r
                    n = J - i - 1
                    diff[pos : pos + n] = row[i + 1 :]
                    pos += n
        return float(np.quantile(diff, percentile))
    rng = np.random.default_rng(seed)
    i = rng.integers(0, J, SAMPLED_PAIRS)
    j = rng.integers(0, J - 1, SAMPLED_PAIRS)
    j = j + (j >= i)
    d = np.concatenate(
        [
            np.linalg.norm(X[i[s : s + 100_000]] - X[j[s : s + 100_000]], axis=1)
            for s in range(0, SAMPLED_PAIRS, 100_000)
        ]
    )
    return float(np.quantile(d, percentile))


def affinity_matrix(
    features,
    percentile: float = 0.01,
    *,
    knn: int | None = None,
    seed: int = 0,
) -> AffinityGraph:
    """Affinity graph with bandwidth set to a percentile of pairwise distances.

    The exponent uses the plain (not squared) Euclidean distance. With ``knn``
    set, each row keeps only its ``knn`` nearest neighbours and the result is
    symmetrised by the elementwise maximum.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("need at least two feature vectors of equal dimension")
    if not 0 < percentile <= 1:
        raise ValueError("percentile must lie in (0, 1]")
    eps = distance_percentile(X, percentile, seed)
    if not eps > 0:
        raise DegenerateCloud(
            f"the {percentile:.2%} distance percentile is zero; too many identical points"
        )
    J = len(X)
    if knn is None or knn >= J - 1:
        W = np.exp(-scipy.spatial.distance.squareform(scipy.spatial.distance.pdist(X)) / eps)
        np.fill_diagonal(W, 1.0)
        return AffinityGraph(W, eps, percentile)

    sq = _sq_norms(X)
    rows, cols, vals = [], [], []
    step = max(1, 4_000_000 // J)
    for start in range(0, J, step):
        sl = slice(start, min(start + step, J))
        d = _distance_block(X, sl, sq)
        idx = np.argpartition(d, knn, axis=1)[:, : knn + 1]
        r = np.repeat(np.arange(sl.start, sl.stop), knn + 1)
        c = idx.ravel()
        dv = np.take_along_axis(d, idx, axis=1).ravel()
        rows.append(r)
        cols.append(c)
        vals.append(np.exp(-dv / eps))
    W = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(J, J)
    )
    W = W.maximum(W.T).tocsr()
    W.setdiag(1.0)
    W.eliminate_zeros()
    return AffinityGraph(W, eps, percentile)


def canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _power(values: np.ndarray, t: float) -> np.ndarray:
    return np.sign(values) * np.abs(values) ** t


@dataclass(frozen=True)
class DiffusionEmbedding:
    """Leading eigenpairs of ``D^-1 W`` and the diffusion coordinates.

    ``eigenvectors[:, 0]`` is the constant trivial eigenvector; ``coordinates``
    has one row per point and columns ``lambda_i^t phi_i`` for ``i = 2..d+1``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    t: float

    @property
    def dim(self) -> int:
        return len(self.eigenvalues) - 1

    @property
    def coordinates(self) -> np.ndarray:
        return self.eigenvectors[:, 1:] * _power(self.eigenvalues[1:], self.t)[None, :]


def _symmetric_operator(W, d_inv_sqrt):
    if sp.issparse(W):
        Dm = sp.diags(d_inv_sqrt)
        return (Dm @ W @ Dm).tocsr()
    return W * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def diffusion_map(graph: AffinityGraph, t: float = 0.3, dim: int = 80, seed: int = 0) -> DiffusionEmbedding:
    """Diffusion map via the symmetric conjugate ``D^-1/2 W D^-1/2``.

    Right eigenvectors are recovered as ``D^-1/2 O``.
    """
    J = graph.J
    if t <= 0:
        raise ValueError("diffusion time must be positive")
    if not 1 <= dim <= J - 1:
        raise ValueError(f"embedding dimension must lie in [1, {J - 1}], got {dim}")
    deg = graph.degrees()
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    M = _symmetric_operator(graph.W, d_inv_sqrt)
    k = dim + 1
    try:
        if J <= DENSE_EIGEN_MAX_J:
            dense = M.toarray() if sp.issparse(M) else M
            dense = 0.5 * (dense + dense.T)
            vals, vecs = scipy.linalg.eigh(dense, subset_by_index=[J - k, J - 1])
        else:
            v0 = np.random.default_rng(seed).standard_normal(J)
            vals, vecs = eigsh(M, k=k, which="LA", v0=v0, tol=1e-10)
    except (np.linalg.LinAlgError, ArpackNoConvergence, scipy.linalg.LinAlgError) as exc:
        raise EigenFailure(f"eigensolver failed: {exc}") from exc
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order] * d_inv_sqrt[:, None]
    if not np.all(np.isfinite(vals)):
        raise EigenFailure("eigensolver returned non-finite eigenvalues")
    return DiffusionEmbedding(vals, canonical_signs(vecs), t)


def diffusion_distance(embedding: DiffusionEmbedding, i: int, j: int) -> float:
    coords = embedding.coordinates
    n = len(coords)
    for k in (i, j):
        if not -n <= k < n:
            raise IndexError(f"point index {k} out of range for {n} points")
    return float(np.linalg.norm(coords[i] - coords[j]))


@dataclass(frozen=True)
class CommonEmbedding:
    """Leading positive eigenpairs of the two-view transition matrix.

    ``eigenvectors`` has ``2J`` rows: rows ``0..J-1`` belong to view x and
    ``J..2J-1`` to view y. Column 0 is the trivial pair with eigenvalue 1.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    t: float

    @property
    def J(self) -> int:
        return self.eigenvectors.shape[0] // 2

    @property
    def dim(self) -> int:
        return len(self.eigenvalues) - 1

    @property
    def features(self) -> np.ndarray:
        """Common features ``v_j`` of dimension ``2 * dim``."""
        w = _power(self.eigenvalues[1:], self.t)[None, :]
        q = self.eigenvectors[:, 1:] * w
        return np.hstack([q[: self.J], q[self.J :]])

    def halves(self, columns) -> tuple[np.ndarray, np.ndarray]:
        """Unweighted eigenvector entries ``q_i(j)`` and ``q_i(J + j)`` for 1-based ``columns``."""
        cols = [c - 1 for c in columns]
        return self.eigenvectors[: self.J, cols], self.eigenvectors[self.J :, cols]


def multiview_block(graph_x: AffinityGraph, graph_y: AffinityGraph) -> np.ndarray:
    """Dense ``2J x 2J`` matrix ``[[0, Wx Wy], [Wy Wx, 0]]`` (small graphs only)."""
    Wx = graph_x.W.toarray() if graph_x.sparse else graph_x.W
    Wy = graph_y.W.toarray() if graph_y.sparse else graph_y.W
    J = len(Wx)
    out = np.zeros((2 * J, 2 * J))
    out[:J, J:] = Wx @ Wy
    out[J:, :J] = Wy @ Wx
    return out


def multiview_dm(
    graph_x: AffinityGraph, graph_y: AffinityGraph, t: float = 0.3, dim: int = 80, seed: int = 0
) -> CommonEmbedding:
    """Fuse two views of the same points by diffusion on their bipartite graph.

    The normalised bipartite operator has a spectrum symmetric about zero, so
    its positive eigenpairs are the singular triplets of the normalised
    off-diagonal block ``Dx^-1/2 Wx Wy Dy^-1/2``.
    """
    J = graph_x.J
    if graph_y.J != J:
        raise SizeMismatch(f"views have {J} and {graph_y.J} points")
    if t <= 0:
        raise ValueError("diffusion time must be positive")
    if not 1 <= dim <= J - 1:
        raise ValueError(f"fusion dimension must lie in [1, {J - 1}], got {dim}")
    Wx, Wy = graph_x.W, graph_y.W
    ones = np.ones(J)
    deg_x = np.asarray(Wx @ (Wy @ ones)).ravel()
    deg_y = np.asarray(Wy @ (Wx @ ones)).ravel()
    ax, ay = 1.0 / np.sqrt(deg_x), 1.0 / np.sqrt(deg_y)
    k = dim + 1
    try:
        if J <= DENSE_EIGEN_MAX_J and not (graph_x.sparse or graph_y.sparse):
            B = (Wx @ Wy) * ax[:, None] * ay[None, :]
            U, s, Vt = scipy.linalg.svd(B, lapack_driver="gesvd")
            U, s, V = U[:, :k], s[:k], Vt[:k].T
        else:
            op = LinearOperator(
                (J, J),
                matvec=lambda v: ax * np.asarray(Wx @ (Wy @ (ay * v.ravel()))).ravel(),
                rmatvec=lambda v: ay * np.asarray(Wy @ (Wx @ (ax * v.ravel()))).ravel(),
                dtype=np.float64,
            )
            v0 = np.random.default_rng(seed).standard_normal(J)
            U, s, Vt = svds(op, k=k, v0=v0, tol=1e-10)
            order = np.argsort(s)[::-1]
            U, s, V = U[:, order], s[order], Vt[order].T
    except (np.linalg.LinAlgError, ArpackNoConvergence, scipy.linalg.LinAlgError) as exc:
        raise EigenFailure(f"eigensolver failed: {exc}") from exc
    q = np.vstack([U * ax[:, None], V * ay[:, None]]) / np.sqrt(2.0)
    return CommonEmbedding(s, canonical_signs(q), t)


def concat_embeddings(embedding_x: DiffusionEmbedding, embedding_y: DiffusionEmbedding) -> np.ndarray:
    """Per-point concatenation ``[x coordinates | y coordinates]``."""
    cx, cy = embedding_x.coordinates, embedding_y.coordinates
    if len(cx) != len(cy):
        raise SizeMismatch(f"embeddings have {len(cx)} and {len(cy)} points")
    return np.hstack([cx, cy])


def spectral_gap_dim(eigenvalues: np.ndarray, max_dim: int | None = None) -> int:
    """Embedding dimension at the largest gap in the non-trivial eigenvalues."""
    vals = np.asarray(eigenvalues)[1:]
    if max_dim is not None:
        vals = vals[: max_dim + 1]
    if len(vals) < 2:
        return max(len(vals), 1)
    return int(np.argmax(vals[:-1] - vals[1:])) + 1


def circular_rank_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Rank correlation of two circular variables, invariant to rotation and reflection.

    Angles are replaced by uniform scores ``2 pi rank / n``; the result is the
    larger of the mean resultant lengths of their difference and their sum.
    """
    a, b = np.asarray(a), np.asarray(b)
    n = len(a)
    ra = 2 * np.pi * np.argsort(np.argsort(a)) / n
    rb = 2 * np.pi * np.argsort(np.argsort(b)) / n
    same = np.abs(np.mean(np.exp(1j * (ra - rb))))
    flipped = np.abs(np.mean(np.exp(1j * (ra + rb))))
    return float(max(same, flipped))
