"""Leave-one-subject-out cross-validation on precomputed epoch features.

The default protocol is transductive: the caller embeds all subjects once
and hands the joint coordinates in, and every fold only re-trains the
classifier. ``losocv_inductive`` recomputes the embedding per fold without
the held-out subject and places test epochs by nearest-neighbour lookup.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InsufficientSubjects, LengthMismatch
from .metrics import confusion_matrix, overall_metrics
from .stages import N_STAGES
from .svm import median_heuristic, predict, train_ova

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SvmSettings:
    C: float = 1.0
    # None selects the median heuristic on each fold's training set
    sigma: float | None = None
    solver: str = "smo"
    tol: float = 1e-4
    standardize: bool = False


@dataclass(frozen=True)
class FoldResult:
    held_out_subject: str
    confusion: np.ndarray
    acc: float
    macro_f1: float
    kappa: float
    test_index: np.ndarray = field(repr=False)
    train_index: np.ndarray = field(repr=False)
    predicted: np.ndarray = field(repr=False)
    sigma: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "held_out_subject": self.held_out_subject,
            "n_test": int(len(self.test_index)),
            "n_train": int(len(self.train_index)),
            "confusion": self.confusion.tolist(),
            "accuracy": self.acc,
            "macro_f1": self.macro_f1,
            "kappa": self.kappa,
            "sigma": self.sigma,
        }


@dataclass(frozen=True)
class LosoResult:
    folds: tuple[FoldResult, ...]
    pooled: np.ndarray
    # predicted stage for every input epoch (each epoch is tested exactly once)
    predicted: np.ndarray = field(repr=False)

    @property
    def metrics(self):
        return overall_metrics(self.pooled)


def _fold_metrics(subject, true, pred, test_idx, train_idx, sigma) -> FoldResult:
    M = confusion_matrix(true, pred)
    om = overall_metrics(M)
    return FoldResult(subject, M, om.accuracy, om.macro_f1, om.kappa, test_idx, train_idx, pred, sigma)


def class_balanced_sample(stages, recordings, seed: int = 0) -> np.ndarray:
    """Indices of a per-recording class-balanced subset.

    Within each recording every present class contributes ``K`` epochs drawn
    without replacement, ``K`` being that recording's smallest class count.
    Returned indices are sorted.
    """
    stages = np.asarray(stages)
    recordings = np.asarray(recordings)
    if len(stages) != len(recordings):
        raise LengthMismatch(f"{len(stages)} stages but {len(recordings)} recording ids")
    rng = np.random.default_rng(seed)
    keep = []
    for rec in np.unique(recordings):
        idx = np.flatnonzero(recordings == rec)
        classes, counts = np.unique(stages[idx], return_counts=True)
        k = counts.min()
        for c in classes:
            members = idx[stages[idx] == c]
            keep.append(members if len(members) == k else rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)


def _check_inputs(n, stages, subjects, recordings):
    stages = np.asarray(stages).astype(np.int64)
    subjects = np.asarray(subjects).astype(str)
    if len(stages) != n or len(subjects) != n:
        raise LengthMismatch(f"{n} feature rows, {len(stages)} stages, {len(subjects)} subject ids")
    if recordings is None:
        recordings = subjects
    recordings = np.asarray(recordings).astype(str)
    if len(recordings) != n:
        raise LengthMismatch(f"{n} feature rows but {len(recordings)} recording ids")
    order = sorted(np.unique(subjects).tolist())
    if len(order) < 2:
        raise InsufficientSubjects(f"cross-validation needs at least 2 subjects, got {len(order)}")
    return stages, subjects, recordings, order


def _train_index(train_idx, stages, recordings, balanced, seed):
    if not balanced:
        return train_idx
    sub = class_balanced_sample(stages[train_idx], recordings[train_idx], seed)
    return train_idx[sub]


def _run_folds(fit_predict, order, n_jobs):
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            folds = list(pool.map(fit_predict, order))
    else:
        folds = [fit_predict(s) for s in order]
    return folds


def _collect(folds, n) -> LosoResult:
    pooled = np.zeros_like(folds[0].confusion)
    predicted = np.full(n, -1, dtype=np.int64)
    for f in folds:
        pooled += f.confusion
        predicted[f.test_index] = f.predicted
    return LosoResult(tuple(folds), pooled, predicted)


def losocv(
    features: np.ndarray,
    stages,
    subjects,
    recordings=None,
    *,
    svm: SvmSettings = SvmSettings(),
    balanced: bool = False,
    seed: int = 0,
    n_jobs: int = 1,
) -> LosoResult:
    """Transductive leave-one-subject-out evaluation.

    Parameters
    ----------
    features : (n, d) array
        Embedding coordinates of every scored epoch, computed over all
        subjects jointly.
    stages, subjects, recordings : length-n sequences
        Expert stage index, subject id and recording id per epoch;
        ``recordings`` defaults to the subject ids.
    balanced : bool
        Class-balance each training set per recording before fitting.
    """
    X = np.asarray(features, dtype=np.float64)
    stages, subjects, recordings, order = _check_inputs(len(X), stages, subjects, recordings)

    def fit_predict(subject: str) -> FoldResult:
        test = np.flatnonzero(subjects == subject)
        train = _train_index(np.flatnonzero(subjects != subject), stages, recordings, balanced, seed)
        model, sigma = _fit(X[train], stages[train], svm, seed)
        pred = predict(model, X[test])
        log.info("fold %s: %d train, %d test", subject, len(train), len(test))
        return _fold_metrics(subject, stages[test], pred, test, train, sigma)

    return _collect(_run_folds(fit_predict, order, n_jobs), len(X))


def _fit(X, y, svm: SvmSettings, seed):
    sigma = svm.sigma
    if sigma is None:
        Xs = X
        if svm.standardize:
            sd = X.std(axis=0)
            sd[sd == 0] = 1.0
            Xs = (X - X.mean(axis=0)) / sd
        sigma = median_heuristic(Xs, seed=seed)
    model = train_ova(
        X, y, svm.C, sigma, n_classes=N_STAGES, tol=svm.tol, solver=svm.solver, standardize=svm.standardize, seed=seed
    )
    return model, float(sigma)


def nearest_neighbor_map(train_raw: np.ndarray, test_raw: np.ndarray, train_coords: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Coordinates of each test row copied from its nearest training row."""
    train_raw = np.asarray(train_raw, dtype=np.float64)
    test_raw = np.asarray(test_raw, dtype=np.float64)
    sq = np.einsum("ij,ij->i", train_raw, train_raw)
    nearest = np.empty(len(test_raw), dtype=np.int64)
    for s in range(0, len(test_raw), chunk):
        block = test_raw[s : s + chunk]
        d = sq[None, :] - 2.0 * block @ train_raw.T
        nearest[s : s + chunk] = np.argmin(d, axis=1)
    return np.asarray(train_coords)[nearest]


def losocv_inductive(
    views: Sequence[np.ndarray],
    stages,
    subjects,
    embed: Callable[[list[np.ndarray]], np.ndarray],
    recordings=None,
    *,
    svm: SvmSettings = SvmSettings(),
    balanced: bool = False,
    seed: int = 0,
    n_jobs: int = 1,
) -> LosoResult:
    """Strict-inductive variant: the embedding never sees the test subject.

    ``embed`` maps a list of per-view training feature arrays to training
    coordinates. Test epochs take the coordinates of their nearest training
    epoch in the concatenated raw feature space.
    """
    views = [np.asarray(v, dtype=np.float64) for v in views]
    n = len(views[0])
    if any(len(v) != n for v in views):
        raise LengthMismatch("views disagree on the number of epochs")
    stages, subjects, recordings, order = _check_inputs(n, stages, subjects, recordings)
    raw = np.hstack(views)

    def fit_predict(subject: str) -> FoldResult:
        test = np.flatnonzero(subjects == subject)
        pool = np.flatnonzero(subjects != subject)
        coords = np.asarray(embed([v[pool] for v in views]))
        test_coords = nearest_neighbor_map(raw[pool], raw[test], coords)
        keep = _train_index(np.arange(len(pool)), stages[pool], recordings[pool], balanced, seed)
        model, sigma = _fit(coords[keep], stages[pool][keep], svm, seed)
        pred = predict(model, test_coords)
        return _fold_metrics(subject, stages[test], pred, test, pool[keep], sigma)

    return _collect(_run_folds(fit_predict, order, n_jobs), n)


def per_recording_metrics(stages, predicted, recordings) -> dict[str, dict]:
    """ACC, Macro-F1 and kappa for every recording separately."""
    stages = np.asarray(stages)
    predicted = np.asarray(predicted)
    recordings = np.asarray(recordings).astype(str)
    out = {}
    for rec in sorted(np.unique(recordings).tolist()):
        m = recordings == rec
        out[rec] = overall_metrics(confusion_matrix(stages[m], predicted[m])).as_dict()
    return out


def per_recording_spread(per_recording: dict[str, dict]) -> dict[str, float]:
    """Sample standard deviation across recordings, each weighted equally."""
    out = {}
    for key in ("accuracy", "macro_f1", "kappa"):
        vals = np.array([v[key] for v in per_recording.values()], dtype=np.float64)
        out[key + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[key + "_mean"] = float(vals.mean()) if len(vals) else float("nan")
    return out
