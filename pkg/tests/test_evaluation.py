import numpy as np
import pytest

from diffsleep.diffusion import affinity_matrix, diffusion_map, multiview_dm
from diffsleep.errors import InsufficientSubjects, LengthMismatch
from diffsleep.evaluation import (
    SvmSettings,
    class_balanced_sample,
    losocv,
    losocv_inductive,
    nearest_neighbor_map,
    per_recording_metrics,
    per_recording_spread,
)
from diffsleep.metrics import confusion_matrix, overall_metrics
from diffsleep.synthetic import coloured_noise, stage_segment, two_view_features


def spectral_features(n_subjects=4, per_class=8, seed=0):
    """Log band powers of synthetic stage-dependent 30 s segments."""
    rng = np.random.default_rng(seed)
    rows, stages, subjects = [], [], []
    edges = np.array([0.5, 2, 4, 6, 8, 11, 14, 18, 25, 35])
    for s in range(n_subjects):
        for c in range(5):
            for _ in range(per_class):
                x = stage_segment(c, 0, 3000, 100.0, rng) + 6 * coloured_noise(3000, rng)
                p = np.abs(np.fft.rfft(x)) ** 2
                f = np.fft.rfftfreq(3000, 0.01)
                rows.append([np.log(p[(f >= a) & (f < b)].mean()) for a, b in zip(edges[:-1], edges[1:])])
                stages.append(c)
                subjects.append(f"S{s}")
    return np.array(rows), np.array(stages), np.array(subjects)


def small_problem(seed=0, n_subjects=3):
    X, _, stages, subjects = two_view_features(n_subjects=n_subjects, per_class=6, seed=seed)
    return X, stages, subjects


def test_three_subject_bookkeeping():
    X, stages, subjects = small_problem()
    res = losocv(X, stages, subjects)
    assert len(res.folds) == 3
    assert [f.held_out_subject for f in res.folds] == ["S00", "S01", "S02"]
    assert res.pooled.sum() == len(X)
    for f in res.folds:
        assert f.confusion.sum() == np.sum(subjects == f.held_out_subject)
    assert np.all(res.predicted >= 0)


def test_pooled_equals_sum_of_folds():
    X, stages, subjects = small_problem(1, 4)
    res = losocv(X, stages, subjects)
    assert np.array_equal(res.pooled, sum(f.confusion for f in res.folds))
    assert np.array_equal(res.pooled, confusion_matrix(stages, res.predicted))


def test_leakage_audit():
    X, stages, subjects = small_problem(2, 4)
    recordings = np.char.add(subjects, "-n1")
    for balanced in (False, True):
        res = losocv(X, stages, subjects, recordings, balanced=balanced)
        ids = np.array([f"{s}:{i}" for i, s in enumerate(subjects)])
        for f in res.folds:
            assert not set(ids[f.train_index]) & set(ids[f.test_index])
            assert set(subjects[f.test_index]) == {f.held_out_subject}
            assert f.held_out_subject not in set(subjects[f.train_index])


def test_metric_self_consistency():
    X, stages, subjects = small_problem(3, 4)
    res = losocv(X, stages, subjects)
    for f in res.folds:
        m = overall_metrics(f.confusion)
        assert abs(m.accuracy - f.acc) <= 1e-12
        assert abs(m.macro_f1 - f.macro_f1) <= 1e-12
        assert abs(m.kappa - f.kappa) <= 1e-12
        d = f.as_dict()
        assert d["n_test"] == len(f.test_index) and d["sigma"] > 0


def test_insufficient_subjects():
    X, stages, _ = small_problem()
    with pytest.raises(InsufficientSubjects):
        losocv(X, stages, np.array(["A"] * len(X)))
    with pytest.raises(LengthMismatch):
        losocv(X, stages[:-1], np.array(["A"] * len(X)))


def test_separable_spectra_dm_pipeline():
    feats, stages, subjects = spectral_features()
    emb = diffusion_map(affinity_matrix(feats, 0.01), t=0.3, dim=20)
    res = losocv(emb.coordinates, stages, subjects)
    assert res.metrics.accuracy >= 0.9


def test_parallel_folds_identical():
    X, stages, subjects = small_problem(4, 4)
    a = losocv(X, stages, subjects, n_jobs=1)
    b = losocv(X, stages, subjects, n_jobs=3)
    assert np.array_equal(a.predicted, b.predicted)


def test_fixed_sigma_and_libsvm():
    X, stages, subjects = small_problem(5, 3)
    res = losocv(X, stages, subjects, svm=SvmSettings(C=2.0, sigma=1.5))
    assert all(f.sigma == 1.5 for f in res.folds)
    pytest.importorskip("sklearn")
    lib = losocv(X, stages, subjects, svm=SvmSettings(C=2.0, sigma=1.5, solver="libsvm"))
    assert np.mean(lib.predicted == res.predicted) > 0.95


# ---------------------------------------------------------------- balancing


def test_balanced_counts_10_4_8():
    stages = np.array([0] * 10 + [1] * 4 + [2] * 8)
    idx = class_balanced_sample(stages, np.zeros(len(stages)), seed=0)
    assert len(idx) == 12
    assert np.bincount(stages[idx]).tolist() == [4, 4, 4]


def test_balanced_already_balanced():
    stages = np.array([0, 1, 2, 2, 1, 0])
    idx = class_balanced_sample(stages, np.zeros(6), seed=3)
    assert idx.tolist() == list(range(6))


def test_balanced_deterministic_and_per_recording():
    rng = np.random.default_rng(0)
    stages = rng.integers(0, 5, 300)
    recs = np.repeat(["a", "b", "c"], 100)
    a = class_balanced_sample(stages, recs, seed=7)
    b = class_balanced_sample(stages, recs, seed=7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, class_balanced_sample(stages, recs, seed=8))
    for r in "abc":
        sub = stages[a][recs[a] == r]
        counts = np.bincount(sub, minlength=5)
        k = np.bincount(stages[recs == r], minlength=5)
        present = k > 0
        assert np.all(counts[present] == k[present].min())


def test_balanced_training_only():
    X, stages, subjects = small_problem(6, 3)
    keep = np.ones(len(X), dtype=bool)
    keep[(stages == 0) & (np.arange(len(X)) % 2 == 0)] = False
    X, stages, subjects = X[keep], stages[keep], subjects[keep]
    res = losocv(X, stages, subjects, balanced=True)
    # every epoch is still tested
    assert res.pooled.sum() == len(X)
    for f in res.folds:
        counts = np.bincount(stages[f.train_index], minlength=5)
        assert len(set(counts[counts > 0])) == 1


# ---------------------------------------------------------------- inductive


def test_nearest_neighbor_map():
    train = np.array([[0.0, 0.0], [10.0, 0.0]])
    coords = np.array([[1.0], [2.0]])
    out = nearest_neighbor_map(train, np.array([[1.0, 1.0], [9.0, -1.0]]), coords)
    assert out.ravel().tolist() == [1.0, 2.0]


def test_inductive_mode():
    X, Y, stages, subjects = two_view_features(n_subjects=4, per_class=8, seed=1, latent_noise=0.2, nuisance_scale=0.3)

    def embed(views):
        gx, gy = (affinity_matrix(v, 0.05) for v in views)
        return multiview_dm(gx, gy, dim=8).features

    res = losocv_inductive([X, Y], stages, subjects, embed)
    assert len(res.folds) == 4
    assert res.pooled.sum() == len(X)
    for f in res.folds:
        assert f.held_out_subject not in set(subjects[f.train_index])
    assert res.metrics.accuracy >= 0.9


# ---------------------------------------------------------------- per recording


def test_per_recording_spread():
    stages = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])
    pred = np.array([0, 1, 2, 0, 1, 1, 1, 1, 1])
    recs = np.repeat(["r1", "r2", "r3"], 3)
    per = per_recording_metrics(stages, pred, recs)
    accs = [per[r]["accuracy"] for r in ("r1", "r2", "r3")]
    assert accs == pytest.approx([1.0, 2 / 3, 1 / 3])
    spread = per_recording_spread(per)
    assert spread["accuracy_std"] == pytest.approx(np.std(accs, ddof=1))
    assert spread["accuracy_mean"] == pytest.approx(np.mean(accs))
