"""Soft-margin RBF kernel SVM (SMO dual solver) and one-versus-all multiclass."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CacheCorrupt, DimensionMismatch, NonFiniteFeature, SingleClassInput
from .stages import N_STAGES

log = logging.getLogger(__name__)

TAU = 1e-12
# training sets up to this size get a precomputed kernel matrix
FULL_KERNEL_MAX_N = 6000


@dataclass(frozen=True)
class RbfKernelParams:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def gamma(self) -> float:
        return 1.0 / (2.0 * self.sigma**2)

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return rbf_kernel(A, B, self.sigma)


def rbf_kernel(A: np.ndarray, B: np.ndarray, sigma: float) -> np.ndarray:
    """``exp(-|a - b|^2 / (2 sigma^2))`` for every row pair."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    d2 = (
        np.einsum("ij,ij->i", A, A)[:, None]
        + np.einsum("ij,ij->i", B, B)[None, :]
        - 2.0 * (A @ B.T)
    )
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma**2))


def median_heuristic(X: np.ndarray, n: int = 2000, seed: int = 0) -> float:
    """Median pairwise distance over a seeded subsample of at most ``n`` rows."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) > n:
        X = X[np.sort(np.random.default_rng(seed).choice(len(X), n, replace=False))]
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2 * X @ X.T
    iu = np.triu_indices(len(X), 1)
    med = float(np.sqrt(np.median(np.maximum(d2[iu], 0.0))))
    return med if med > 0 else 1.0


@dataclass(frozen=True)
class BinarySvmModel:
    """Trained binary classifier; ``dual_coef[i] = alpha_i * y_i`` for each support vector."""

    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    kernel: RbfKernelParams
    C: float
    kkt_gap: float = 0.0
    n_iter: int = 0
    dual_objective: float = float("nan")

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise DimensionMismatch(f"model expects {self.dim} features, got {X.shape[1]}")
        out = np.empty(len(X))
        step = 4096
        for s in range(0, len(X), step):
            K = self.kernel(X[s : s + step], self.support_vectors)
            out[s : s + step] = K @ self.dual_coef + self.bias
        return out


def decision_value(model: BinarySvmModel, x: np.ndarray) -> float | np.ndarray:
    """``sum_i alpha_i y_i K(s_i, x) + b``; scalar for a single vector."""
    x = np.asarray(x, dtype=np.float64)
    values = model.decision_function(x)
    return float(values[0]) if x.ndim == 1 else values


class _KernelRows:
    """Kernel rows on demand with a small LRU cache."""

    def __init__(self, X: np.ndarray, sigma: float, K: np.ndarray | None, cache_rows: int = 512):
        self.X = X
        self.sigma = sigma
        self.K = K
        self.cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self.cache_rows = cache_rows

    def __getitem__(self, i: int) -> np.ndarray:
        if self.K is not None:
            return self.K[i]
        row = self.cache.get(i)
        if row is None:
            row = rbf_kernel(self.X[i], self.X, self.sigma)[0]
            self.cache[i] = row
            if len(self.cache) > self.cache_rows:
                self.cache.popitem(last=False)
        else:
            self.cache.move_to_end(i)
        return row


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise DimensionMismatch("features must be 2-D with one row per label")
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("features contain NaN or infinite values")
    return X, y


def smo(
    K: _KernelRows,
    y: np.ndarray,
    C: float,
    tol: float = 1e-4,
    max_iter: int | None = None,
) -> tuple[np.ndarray, float, float, int]:
    """Solve ``min 1/2 a'Qa - e'a`` s.t. ``0 <= a <= C``, ``y'a = 0``.

    Working pairs are chosen by maximal violation for ``i`` and by the
    second-order gain for ``j``. Returns ``(alpha, rho, gap, iterations)``
    where the decision function is ``sum a_i y_i K(x_i, .) - rho``.
    """
    n = len(y)
    y = y.astype(np.float64)
    alpha = np.zeros(n)
    G = -np.ones(n)
    diag = np.ones(n)  # RBF: K(x, x) = 1
    if max_iter is None:
        max_iter = max(10_000_000, 100 * n)
    gap = np.inf
    it = 0
    while it < max_iter:
        yG = -y * G
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        cand = np.where(up, yG, -np.inf)
        i = int(np.argmax(cand))
        m = cand[i]
        M = np.min(np.where(low, yG, np.inf))
        gap = m - M
        if gap < tol:
            break
        Ki = K[i]
        b = m - yG
        a = diag[i] + diag - 2.0 * Ki
        a = np.where(a > 0, a, TAU)
        gain = np.where(low & (yG < m), -(b * b) / a, np.inf)
        j = int(np.argmin(gain))
        Kj = K[j]
        ai_old, aj_old = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(diag[i] + diag[j] - 2.0 * Ki[j], TAU)
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            elif alpha[j] > C:
                alpha[j] = C
                alpha[i] = C + diff
        else:
            quad = max(diag[i] + diag[j] - 2.0 * Ki[j], TAU)
            delta = (G[i] - G[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            elif alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = total
        di, dj = alpha[i] - ai_old, alpha[j] - aj_old
        # Q_it = y_i y_t K_it
        G += y * (y[i] * di * Ki + y[j] * dj * Kj)
        it += 1
    else:
        warnings.warn(f"SMO stopped after {max_iter} iterations with gap {gap:.3g}")

    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(np.mean(yG[free]))
    else:
        at_upper = alpha >= C
        ub_mask = (at_upper & (y < 0)) | (~at_upper & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (~at_upper & (y < 0))
        ub = np.min(yG[ub_mask]) if ub_mask.any() else np.inf
        lb = np.max(yG[lb_mask]) if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2)
    return alpha, rho, float(gap), it


def train_binary(
    X: np.ndarray,
    y: np.ndarray,
    C: float = 1.0,
    sigma: float = 1.0,
    *,
    tol: float = 1e-4,
    solver: str = "smo",
    kernel_matrix: np.ndarray | None = None,
) -> BinarySvmModel:
    """Train a binary RBF SVM on labels in ``{-1, +1}``.

    ``kernel_matrix`` may pass a precomputed Gram matrix of ``X`` (the OVA
    trainer shares one across classes).
    """
    X, y = _check_xy(X, y)
    y = np.where(np.asarray(y) > 0, 1, -1)
    if not (np.any(y > 0) and np.any(y < 0)):
        raise SingleClassInput("binary training needs at least one example of each sign")
    if not (C > 0 and sigma > 0):
        raise ValueError("C and sigma must be positive")
    kernel = RbfKernelParams(sigma)

    if solver == "libsvm":
        return _train_libsvm(X, y, C, kernel, tol)
    if solver != "smo":
        raise ValueError(f"unknown solver {solver!r}")

    if kernel_matrix is None and len(X) <= FULL_KERNEL_MAX_N:
        kernel_matrix = rbf_kernel(X, X, sigma)
    rows = _KernelRows(X, sigma, kernel_matrix)
    alpha, rho, gap, it = smo(rows, y, C, tol)
    sv = alpha > 0
    obj = float("nan")
    if kernel_matrix is not None:
        ay = alpha * y
        obj = float(alpha.sum() - 0.5 * ay @ kernel_matrix @ ay)
    return BinarySvmModel(
        support_vectors=X[sv].copy(),
        dual_coef=(alpha * y)[sv],
        bias=-rho,
        kernel=kernel,
        C=float(C),
        kkt_gap=gap,
        n_iter=it,
        dual_objective=obj,
    )


def _train_libsvm(X, y, C, kernel: RbfKernelParams, tol) -> BinarySvmModel:
    from sklearn.svm import SVC

    clf = SVC(C=C, kernel="rbf", gamma=kernel.gamma, tol=tol, shrinking=True)
    clf.fit(X, y)
    # positive decision values belong to classes_[1] == +1
    return BinarySvmModel(
        support_vectors=clf.support_vectors_.copy(),
        dual_coef=clf.dual_coef_[0].copy(),
        bias=float(clf.intercept_[0]),
        kernel=kernel,
        C=float(C),
        kkt_gap=float(tol),
        n_iter=int(np.sum(clf.n_iter_)),
    )


@dataclass(frozen=True)
class OvaModel:
    """One binary model per class; ``None`` for classes absent from training.

    Prediction is the argmax of the real-valued decision functions; ties go
    to the lowest class index.
    """

    models: tuple[BinarySvmModel | None, ...]
    n_classes: int = N_STAGES
    standardize: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def decision_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.standardize is not None:
            mu, sd = self.standardize
            X = (X - mu) / sd
        scores = np.full((len(X), self.n_classes), -np.inf)
        for c, model in enumerate(self.models):
            if model is not None:
                scores[:, c] = model.decision_function(X)
        return scores


def train_ova(
    X: np.ndarray,
    labels: np.ndarray,
    C: float = 1.0,
    sigma: float | None = None,
    *,
    n_classes: int = N_STAGES,
    tol: float = 1e-4,
    solver: str = "smo",
    standardize: bool = False,
    seed: int = 0,
) -> OvaModel:
    """One-versus-all training over integer labels ``0..n_classes-1``.

    ``sigma=None`` selects the median heuristic on (a subsample of) ``X``.
    """
    X, labels = _check_xy(X, labels)
    labels = labels.astype(int)
    present = np.unique(labels)
    if len(present) < 2:
        raise SingleClassInput("one-versus-all training needs at least two classes")
    scaler = None
    if standardize:
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        X = (X - mu) / sd
        scaler = (mu, sd)
    if sigma is None:
        sigma = median_heuristic(X, seed=seed)
    K = rbf_kernel(X, X, sigma) if solver == "smo" and len(X) <= FULL_KERNEL_MAX_N else None
    models: list[BinarySvmModel | None] = []
    for c in range(n_classes):
        if c not in present:
            models.append(None)
            continue
        y = np.where(labels == c, 1, -1)
        models.append(
            train_binary(X, y, C, sigma, tol=tol, solver=solver, kernel_matrix=K)
        )
    return OvaModel(tuple(models), n_classes, scaler)


def predict(model: OvaModel, X: np.ndarray) -> np.ndarray:
    """Class index with the largest decision value for every row of ``X``."""
    return np.argmax(model.decision_matrix(X), axis=1)


# ---------------------------------------------------------------- persistence
#
# Layout of a saved OvaModel (all integers and floats little-endian):
#
#     b"DSSVM001"                  magic
#     uint32                       length of the JSON manifest in bytes
#     JSON manifest (utf-8)        version, n_classes, dim, standardize, and per
#                                  class {sigma, C, bias, n_sv, kkt_gap} or null
#     float64 blocks               per present class in class order: support
#                                  vectors (n_sv x dim, row-major) then dual
#                                  coefficients (n_sv); then mean and scale
#                                  (dim each) when standardize is true
#     32 bytes                     SHA-256 of everything above

MODEL_MAGIC = b"DSSVM001"
MODEL_VERSION = 1


def encode_ova(model: OvaModel) -> bytes:
    dims = {m.dim for m in model.models if m is not None}
    if len(dims) != 1:
        raise DimensionMismatch("all binary models must share one feature dimension")
    dim = dims.pop()
    manifest = {
        "version": MODEL_VERSION,
        "n_classes": model.n_classes,
        "dim": dim,
        "standardize": model.standardize is not None,
        "classes": [
            None
            if m is None
            else {
                "sigma": m.kernel.sigma,
                "C": m.C,
                "bias": m.bias,
                "n_sv": int(len(m.dual_coef)),
                "kkt_gap": m.kkt_gap,
            }
            for m in model.models
        ],
    }
    blocks = []
    for m in model.models:
        if m is not None:
            blocks += [m.support_vectors, m.dual_coef]
    if model.standardize is not None:
        blocks += list(model.standardize)
    payload = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = MODEL_MAGIC + struct.pack("<I", len(head)) + head + payload
    return body + hashlib.sha256(body).digest()


def decode_ova(raw: bytes) -> OvaModel:
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC or len(raw) < len(MODEL_MAGIC) + 36:
        raise CacheCorrupt("not a saved SVM model (bad magic or too short)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CacheCorrupt("model checksum mismatch")
    (hlen,) = struct.unpack_from("<I", body, len(MODEL_MAGIC))
    start = len(MODEL_MAGIC) + 4
    manifest = json.loads(body[start : start + hlen].decode("utf-8"))
    if manifest.get("version") != MODEL_VERSION:
        raise CacheCorrupt(f"unsupported model version {manifest.get('version')!r}")
    data = np.frombuffer(body, dtype="<f8", offset=start + hlen)
    dim = manifest["dim"]
    pos = 0

    def take(n):
        nonlocal pos
        out = data[pos : pos + n].astype(np.float64)
        pos += n
        return out

    models = []
    for entry in manifest["classes"]:
        if entry is None:
            models.append(None)
            continue
        n_sv = entry["n_sv"]
        sv = take(n_sv * dim).reshape(n_sv, dim)
        coef = take(n_sv)
        models.append(
            BinarySvmModel(sv, coef, entry["bias"], RbfKernelParams(entry["sigma"]), entry["C"], entry["kkt_gap"])
        )
    scaler = (take(dim), take(dim)) if manifest["standardize"] else None
    if pos != len(data):
        raise CacheCorrupt("model payload length does not match its manifest")
    return OvaModel(tuple(models), manifest["n_classes"], scaler)


def save_ova(model: OvaModel, path) -> None:
    Path(path).write_bytes(encode_ova(model))


def load_ova(path) -> OvaModel:
    return decode_ova(Path(path).read_bytes())
