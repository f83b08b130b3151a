"""Confusion matrices and the derived agreement scores.

Rows are expert stages and columns predicted stages, both in the fixed
order Awake, REM, N1, N2, N3.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMatrix, LengthMismatch
from .stages import N_STAGES, STAGE_NAMES


def confusion_matrix(true_stages, predicted_stages, n_classes: int = N_STAGES) -> np.ndarray:
    """Unnormalized ``n_classes x n_classes`` count matrix.

    ``counts[p, q]`` is the number of epochs scored ``p`` by the expert and
    predicted as ``q``.
    """
    t = np.asarray(true_stages, dtype=np.int64).ravel()
    p = np.asarray(predicted_stages, dtype=np.int64).ravel()
    if len(t) != len(p):
        raise LengthMismatch(f"{len(t)} true stages but {len(p)} predictions")
    if len(t) == 0:
        raise LengthMismatch("no epochs to tally")
    if t.min() < 0 or p.min() < 0 or t.max() >= n_classes or p.max() >= n_classes:
        raise ValueError(f"stage indices must lie in [0, {n_classes})")
    M = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(M, (t, p), 1)
    return M


def _check_matrix(M) -> np.ndarray:
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {M.shape}")
    if np.any(M < 0):
        raise ValueError("confusion counts must be non-negative")
    return M.astype(np.float64)


@dataclass(frozen=True)
class ClassMetrics:
    """Per-class precision, recall and F1 as fractions.

    ``undefined_precision[c]`` marks classes never predicted (PR reported as 0);
    ``undefined_recall[c]`` marks classes absent from the expert labels.
    """

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    undefined_precision: np.ndarray = field(repr=False)
    undefined_recall: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        names = STAGE_NAMES if len(self.precision) == N_STAGES else [str(i) for i in range(len(self.precision))]
        return {
            n: {
                "precision": float(self.precision[i]),
                "recall": float(self.recall[i]),
                "f1": float(self.f1[i]),
                "precision_undefined": bool(self.undefined_precision[i]),
                "recall_undefined": bool(self.undefined_recall[i]),
            }
            for i, n in enumerate(names)
        }


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bad = den == 0
    out = np.divide(num, den, out=np.zeros_like(num), where=~bad)
    return out, bad


def per_class_metrics(M) -> ClassMetrics:
    M = _check_matrix(M)
    diag = np.diag(M).copy()
    pr, no_pred = _ratio(diag, M.sum(axis=0))
    re, no_true = _ratio(diag, M.sum(axis=1))
    f1, _ = _ratio(2 * pr * re, pr + re)
    return ClassMetrics(pr, re, f1, no_pred, no_true)


@dataclass(frozen=True)
class OverallMetrics:
    accuracy: float
    macro_f1: float
    kappa: float
    expected_accuracy: float
    # set when EA = 1 and kappa falls back to the degenerate rule
    kappa_degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "kappa": self.kappa,
            "expected_accuracy": self.expected_accuracy,
            "kappa_degenerate": self.kappa_degenerate,
        }


def overall_metrics(M) -> OverallMetrics:
    """ACC, Macro-F1 (mean over all classes) and Cohen's kappa.

    When only a single class is present on both axes the expected accuracy is
    1 and kappa is 0/0; it is then set to 1 for a perfect prediction and 0
    otherwise, and ``kappa_degenerate`` is raised.
    """
    M = _check_matrix(M)
    total = M.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix has no counts")
    acc = np.trace(M) / total
    ea = float(M.sum(axis=1) @ M.sum(axis=0)) / total**2
    mf1 = float(per_class_metrics(M).f1.mean())
    if np.isclose(ea, 1.0, rtol=0, atol=1e-15):
        return OverallMetrics(float(acc), mf1, 1.0 if acc == 1.0 else 0.0, float(ea), True)
    kappa = (acc - ea) / (1.0 - ea)
    return OverallMetrics(float(acc), mf1, float(kappa), float(ea))


def format_table(M, *, as_percent: bool = True) -> list[dict]:
    """Rows laid out like a published staging table.

    Each row carries the raw counts, the row-normalized percentage of every
    cell, and the class PR/RE/F1.
    """
    M = np.asarray(M)
    cls = per_class_metrics(M)
    rows = []
    scale = 100.0 if as_percent else 1.0
    sums = M.sum(axis=1)
    for i, name in enumerate(STAGE_NAMES[: len(M)]):
        frac = M[i] / sums[i] if sums[i] else np.zeros(len(M))
        rows.append(
            {
                "stage": name,
                "counts": [int(v) for v in M[i]],
                "row_percent": [round(float(v) * scale, 2) for v in frac],
                "PR": round(float(cls.precision[i]) * scale, 2),
                "RE": round(float(cls.recall[i]) * scale, 2),
                "F1": round(float(cls.f1[i]) * scale, 2),
            }
        )
    return rows
