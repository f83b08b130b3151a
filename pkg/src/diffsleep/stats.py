"""One-tailed paired and variance tests with Bonferroni thresholds."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import TooFewPairs, ZeroVariance

EXACT_MAX_N = 12
MIN_PAIRS = 5


@dataclass(frozen=True)
class StatTestResult:
    test: str
    statistic: float
    p_value: float
    # "greater": the first sample is hypothesised larger
    alternative: str
    n: int
    bonferroni_alpha: float = 0.05
    method: str = ""

    @property
    def significant(self) -> bool:
        return self.p_value < self.bonferroni_alpha

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["significant"] = self.significant
        return d


def _check_alternative(alternative: str) -> None:
    if alternative not in ("greater", "less"):
        raise ValueError(f"alternative must be 'greater' or 'less', got {alternative!r}")


def _exact_upper_tail(doubled_ranks: np.ndarray, observed: int) -> float:
    """P(W+ >= observed) under random signs, W+ in doubled-rank units.

    Counts subsets by a knapsack over the rank values rather than listing
    sign patterns.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks.astype(int):
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    return float(counts[observed:].sum() / 2.0 ** len(doubled_ranks))


def wilcoxon_signed_rank(
    paired_a,
    paired_b,
    alternative: str = "greater",
    method: str = "auto",
) -> StatTestResult:
    """One-tailed Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped. The statistic is the rank sum of positive
    differences (average ranks for ties). With ``method="auto"`` the null
    distribution is exact for at most 12 pairs, otherwise a normal
    approximation with tie and continuity correction is used.
    """
    _check_alternative(alternative)
    a = np.asarray(paired_a, dtype=np.float64).ravel()
    b = np.asarray(paired_b, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n < MIN_PAIRS:
        raise TooFewPairs(f"{n} non-zero paired differences; at least {MIN_PAIRS} needed")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(int)
        if alternative == "greater":
            p = _exact_upper_tail(doubled, int(round(2 * w_plus)))
        else:
            w_minus = float(ranks[d < 0].sum())
            p = _exact_upper_tail(doubled, int(round(2 * w_minus)))
    elif method == "approx":
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        diff = w_plus - mean
        if alternative == "less":
            diff = -diff
        z = (diff - 0.5) / np.sqrt(var)
        p = float(stats.norm.sf(z))
    else:
        raise ValueError(f"unknown method {method!r}")
    return StatTestResult("wilcoxon", w_plus, min(max(p, 0.0), 1.0), alternative, n, method=method)


def f_cdf(x: float, dfn: float, dfd: float) -> float:
    return float(stats.f.cdf(x, dfn, dfd))


def f_test_variance(sample_a, sample_b, alternative: str = "greater") -> StatTestResult:
    """One-tailed F test of equal variances.

    The statistic is ``var(a) / var(b)`` with unbiased variances; under the
    null it follows F(n_a - 1, n_b - 1).
    """
    _check_alternative(alternative)
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if len(a) < 2 or len(b) < 2:
        raise ZeroVariance("each sample needs at least two values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va <= 0 or vb <= 0:
        raise ZeroVariance("sample variance is zero")
    ratio = float(va / vb)
    dfn, dfd = len(a) - 1, len(b) - 1
    if alternative == "greater":
        p = float(stats.f.sf(ratio, dfn, dfd))
    else:
        p = float(stats.f.cdf(ratio, dfn, dfd))
    return StatTestResult("f_variance", ratio, p, alternative, len(a) + len(b), method="exact")


def bonferroni(p_values, alpha: float = 0.05) -> list[bool]:
    """Per-test significance at the family-wise threshold ``alpha / m``."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if len(p) == 0:
        raise ValueError("no p-values given")
    return [bool(v < alpha / len(p)) for v in p]


def with_bonferroni(results: list[StatTestResult], alpha: float = 0.05) -> list[StatTestResult]:
    """Copies of ``results`` carrying the adjusted threshold ``alpha / m``."""
    m = len(results)
    return [dataclasses.replace(r, bonferroni_alpha=alpha / m) for r in results]
