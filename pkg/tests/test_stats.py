import itertools
import math

import numpy as np
import pytest
from scipy.stats import rankdata

from diffsleep.errors import TooFewPairs, ZeroVariance
from diffsleep.stats import bonferroni, f_cdf, f_test_variance, wilcoxon_signed_rank, with_bonferroni


def enumerated_p(diffs):
    """Upper-tail P(W+ >= observed) by listing all sign assignments."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        if np.dot(signs, ranks) >= observed - 1e-9:
            hits += 1
    return hits / 2 ** len(d)


def betacf(a, b, x, itmax=500, eps=3e-16):
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1, a - 1
    c, d = 1.0, 1 - qab * x / qap
    d = 1 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, itmax + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1 + aa * d
        d = 1 / (d if abs(d) > tiny else tiny)
        c = 1 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1 + aa * d
        d = 1 / (d if abs(d) > tiny else tiny)
        c = 1 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1) < eps:
            break
    return h


def betainc(a, b, x):
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(1 - x)
    if x < (a + 1) / (a + b + 2):
        return math.exp(lbt) * betacf(a, b, x) / a
    return 1 - math.exp(lbt) * betacf(b, a, 1 - x) / b


def f_cdf_oracle(x, d1, d2):
    return betainc(d1 / 2, d2 / 2, d1 * x / (d1 * x + d2))


# ---------------------------------------------------------------- Wilcoxon


def test_six_positive_differences():
    r = wilcoxon_signed_rank(np.arange(1, 7) + 0.5, np.zeros(6))
    assert r.p_value == pytest.approx(1 / 64, abs=1e-15)
    assert enumerated_p(np.arange(1, 7)) == 1 / 64
    assert r.statistic == 21 and r.n == 6 and r.method == "exact"


def test_exact_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(5, 13))
        a, b = rng.normal(0.3, 1, n), rng.normal(0, 1, n)
        # round to force some tied magnitudes
        a, b = np.round(a, 1), np.round(b, 1)
        d = a - b
        if np.count_nonzero(d) < 5:
            continue
        assert wilcoxon_signed_rank(a, b, method="exact").p_value == pytest.approx(enumerated_p(d), abs=1e-12)
        assert wilcoxon_signed_rank(a, b, alternative="less", method="exact").p_value == pytest.approx(
            enumerated_p(-d), abs=1e-12
        )


def test_identical_samples_too_few_pairs():
    x = np.arange(10.0)
    with pytest.raises(TooFewPairs):
        wilcoxon_signed_rank(x, x)


FIXTURES = {
    8: [0.8, -0.3, 1.2, 0.5, 1.9, -0.7, 2.4, 1.1],
    9: [0.2, 1.4, -0.9, 0.6, 2.2, 0.4, -0.1, 1.6, 0.9],
    10: [0.8, -1.1, 0.6, -0.4, 1.5, 0.3, -0.2, 1.9, 1.2, -0.6],
    11: [0.4, 1.7, 0.9, -0.6, 1.1, -0.3, 2.0, 0.7, 1.4, -0.8, 0.5],
    12: [0.3, 1.3, -0.2, 0.8, 1.9, -0.5, 0.6, 1.5, -1.0, 0.9, 2.3, 0.4],
}


@pytest.mark.parametrize("n", sorted(FIXTURES))
def test_exact_vs_approx(n):
    d = np.array(FIXTURES[n])
    assert len(d) == n
    exact = wilcoxon_signed_rank(d, np.zeros(n), method="exact").p_value
    approx = wilcoxon_signed_rank(d, np.zeros(n), method="approx").p_value
    assert exact == pytest.approx(enumerated_p(d), abs=1e-12)
    assert abs(exact - approx) <= 0.01


def test_auto_switches_to_approx():
    rng = np.random.default_rng(1)
    r = wilcoxon_signed_rank(rng.normal(size=30), rng.normal(size=30))
    assert r.method == "approx" and 0 <= r.p_value <= 1


def test_invalid_alternative():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(np.arange(6.0), np.zeros(6), alternative="two-sided")


# ---------------------------------------------------------------- F test


@pytest.mark.parametrize("x,d1,d2", [(0.5, 3, 7), (1.0, 5, 5), (2.3, 10, 4), (4.1, 1, 12), (0.12, 19, 38)])
def test_f_cdf_incomplete_beta_oracle(x, d1, d2):
    assert abs(f_cdf(x, d1, d2) - f_cdf_oracle(x, d1, d2)) <= 1e-6


def test_identical_samples_ratio_one():
    x = np.array([1.0, 3.0, 2.0, 5.0, 4.0])
    r = f_test_variance(x, x.copy())
    assert r.statistic == 1.0
    assert r.p_value == pytest.approx(0.5)


def test_f_test_direction():
    rng = np.random.default_rng(2)
    a, b = rng.normal(0, 3, 40), rng.normal(0, 1, 40)
    r = f_test_variance(a, b)
    assert r.statistic == pytest.approx(a.var(ddof=1) / b.var(ddof=1))
    assert r.p_value < 0.001
    assert f_test_variance(a, b, alternative="less").p_value > 0.999


def test_zero_variance():
    with pytest.raises(ZeroVariance):
        f_test_variance(np.ones(5), np.arange(5.0))


# ---------------------------------------------------------------- Bonferroni


def test_bonferroni_examples():
    assert bonferroni([0.01, 0.04]) == [True, False]
    assert bonferroni([0.049]) == [True]
    assert bonferroni([1.0, 1.0, 1.0]) == [False, False, False]
    with pytest.raises(ValueError):
        bonferroni([])


def test_with_bonferroni_threshold():
    results = [wilcoxon_signed_rank(np.arange(1, 7.0), np.zeros(6)) for _ in range(3)]
    adjusted = with_bonferroni(results)
    assert all(r.bonferroni_alpha == 0.05 / 3 for r in adjusted)
    assert all(r.significant for r in adjusted)
    many = with_bonferroni(results * 2)
    assert not any(r.significant for r in many)
    d = many[0].as_dict()
    assert d["significant"] is False and d["test"] == "wilcoxon"
