import numpy as np
import pytest
from scipy.special import expit

from covbt import nuisance as nz
from covbt.core import ComparisonDataset, DataError
from covbt.nuisance import (LearnerSpec, NuisanceBundle, assign_folds, clip_simplex,
                            estimate_nuisances, fit_density_ratio, fit_outcome,
                            fit_propensity, make_learner)
from covbt.simulation import gen_setting1


def test_fold_sizes_and_determinism():
    assert sorted(np.bincount(assign_folds(10, 5, 0))) == [2] * 5
    assert list(np.bincount(assign_folds(7, 5, 3))) == [2, 2, 1, 1, 1]
    np.testing.assert_array_equal(assign_folds(100, 5, 9), assign_folds(100, 5, 9))
    with pytest.raises(DataError):
        assign_folds(3, 5)
    with pytest.raises(ValueError):
        assign_folds(10, 1)


def test_fusion_folds_cover_both_blocks():
    ds = ComparisonDataset(3, np.zeros((10, 1)), np.arange(10) % 3, np.ones(10), np.ones((15, 1)))
    f = assign_folds(ds, 5, 0)
    assert len(f) == 25
    assert list(np.bincount(f[:10])) == [2] * 5
    assert list(np.bincount(f[10:])) == [3] * 5


def test_learner_spec_roundtrip_and_validation():
    spec = LearnerSpec("stack", base=({"kind": "knn", "k": 5}, {"kind": "constant_mean"}))
    assert LearnerSpec.from_dict(spec.to_dict()) == spec
    s2 = LearnerSpec.from_dict({"kind": "logistic_basis", "terms": [[1, 0], [0, 1]]})
    assert s2.terms == ((1, 0), (0, 1))
    for bad in [{"kind": "forest"}, {"kind": "logistic_basis", "degree": 4},
                {"kind": "knn", "k": 0}, {"kind": "stack"}]:
        with pytest.raises(ValueError):
            LearnerSpec.from_dict(bad)


def test_monomials_skip_binary_powers():
    X = np.column_stack([np.linspace(-1, 1, 10), np.arange(10) % 2])
    exps = nz._monomials(X, LearnerSpec(degree=3, interactions=True))
    assert (0, 2) not in exps and (2, 1) in exps and (3, 0) in exps
    assert all(sum(e) <= 3 for e in exps)
    assert nz._monomials(X, LearnerSpec(degree=2)) == [(1, 0), (0, 1), (2, 0)]


def test_logistic_basis_recovers_truth():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5000, 2))
    p = expit(0.5 + X @ np.array([1.0, -0.7]))
    y = (rng.random(5000) < p).astype(float)
    fit = make_learner(LearnerSpec(degree=1)).fit(X, y)
    Xt = rng.normal(size=(2000, 2))
    assert np.mean((fit.predict(Xt) - expit(0.5 + Xt @ np.array([1.0, -0.7]))) ** 2) <= 0.005


def test_logistic_basis_fractional_outcomes():
    X = np.linspace(-1, 1, 200)[:, None]
    y = np.full(200, 0.75)
    fit = make_learner(LearnerSpec(degree=1)).fit(X, y)
    np.testing.assert_allclose(fit.predict(X), 0.75, atol=1e-4)


def test_constant_knn_cell_learners():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([1.0, 0.0, 1.0, 1.0])
    assert np.all(make_learner(LearnerSpec("constant_mean")).fit(X, y).predict(X) == 0.75)
    np.testing.assert_allclose(make_learner(LearnerSpec("cell_mean")).fit(X, y).predict(X),
                               [0.5, 0.5, 1.0, 1.0])
    np.testing.assert_allclose(make_learner(LearnerSpec("knn", k=2)).fit(X, y).predict(
        np.array([[0.1], [0.9]])), [0.5, 1.0])
    st = make_learner(LearnerSpec("stack", base=({"kind": "constant_mean"},
                                                 {"kind": "cell_mean"}))).fit(
        np.repeat(X, 5, axis=0), np.repeat(y, 5))
    assert np.all((st.predict(X) >= 0) & (st.predict(X) <= 1))


def test_outcome_clipping_and_constant():
    n = 300
    ds = ComparisonDataset(3, np.zeros((n, 1)), np.arange(n) % 3, np.where(np.arange(n) % 3 == 0, 1.0, 0.5))
    f = assign_folds(ds, 5, 0)
    m = fit_outcome(ds, LearnerSpec("constant_mean"), f, clip_eps=0.01).values
    np.testing.assert_allclose(m[:, 0], 0.99)
    np.testing.assert_allclose(m[:, 1:], 0.5)


def test_outcome_missing_pair_marked_and_error_names_pair():
    n = 60
    ds = ComparisonDataset(3, np.zeros((n, 1)), np.arange(n) % 2, np.ones(n) * 0.5)
    m = fit_outcome(ds, LearnerSpec("constant_mean"), assign_folds(ds, 5, 0)).values
    assert np.all(np.isnan(m[:, 2])) and not np.any(np.isnan(m[:, :2]))
    pairs = np.zeros(n, dtype=int)
    pairs[0] = 1
    ds2 = ComparisonDataset(3, np.zeros((n, 1)), pairs, np.ones(n) * 0.5)
    folds = np.arange(n) % 5
    with pytest.raises(DataError, match=r"\(1, 3\).*fold 0"):
        fit_outcome(ds2, LearnerSpec("constant_mean"), folds)


class _Spy:
    log = []

    def __init__(self, spec):
        pass

    def fit(self, X, y):
        self.ids = X[:, 0].astype(int)
        return self

    def predict(self, X):
        _Spy.log.append((set(self.ids), set(X[:, 0].astype(int))))
        return np.full(len(X), 0.5)


def test_cross_fitting_honesty(monkeypatch):
    n, m = 60, 40
    ds = ComparisonDataset(3, np.arange(n, dtype=float)[:, None], np.arange(n) % 3,
                           np.ones(n) * 0.5, np.arange(n, n + m, dtype=float)[:, None])
    folds = assign_folds(ds, 5, 1)
    monkeypatch.setattr(nz, "make_learner", lambda spec: _Spy(spec))
    _Spy.log = []
    fit_outcome(ds, LearnerSpec(), folds)
    fit_propensity(ds, LearnerSpec(), folds)
    fit_density_ratio(ds, LearnerSpec(), folds)
    assert len(_Spy.log) == 5 * 3 + 5 * 3 + 5
    for train, pred in _Spy.log:
        assert {folds[i] for i in pred} and not ({folds[i] for i in train} & {folds[i] for i in pred})


def test_clip_simplex():
    P = np.array([[0.001, 0.499, 0.5], [0.2, 0.0, 0.8], [0.0, 0.0, 1.0]])
    Q = clip_simplex(np.where(P > 0, P, 0) + np.array([[0, 0, 0], [0, 0, 0], [1e-9, 1e-9, 0]]), 0.01)
    np.testing.assert_allclose(Q.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(Q[Q > 0] >= 0.01 - 1e-15)
    assert Q[1, 1] == 0.0
    np.testing.assert_allclose(Q[0], [0.01, 0.499 * 0.99 / 0.999, 0.5 * 0.99 / 0.999])


def test_propensity_uniform_design():
    ds = gen_setting1(5000, 0, 1)
    folds = assign_folds(ds, 5, 0)
    pi = fit_propensity(ds, LearnerSpec("constant_mean"), folds).values
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.abs(pi - 1 / 3) < 0.03)
    pi = fit_propensity(ds, LearnerSpec(degree=1), folds).values
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.abs(pi.mean(axis=0) - 1 / 3) < 0.03)
    assert np.quantile(np.abs(pi - 1 / 3), 0.95) < 0.03


def test_propensity_categorical_frequencies():
    X = np.repeat([[1.0, 0.0], [0.0, 1.0]], 50, axis=0)
    pairs = np.r_[np.arange(50) % 2, np.arange(50) % 3]
    ds = ComparisonDataset(3, X, pairs, np.ones(100) * 0.5)
    folds = np.zeros(100, dtype=int)
    folds[::2] = 1
    pi = fit_propensity(ds, LearnerSpec("cell_mean"), folds).values
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
    for i in range(100):
        train = (folds != folds[i]) & np.all(X == X[i], axis=1)
        freq = np.bincount(pairs[train], minlength=3) / train.sum()
        np.testing.assert_allclose(pi[i], clip_simplex(np.maximum(freq, 1e-300)[None], 0.01)[0],
                                   atol=1e-12)


def test_single_pair_only_for_two_players():
    ds = ComparisonDataset(2, np.zeros((20, 1)), np.zeros(20), np.ones(20) * 0.5)
    pi = fit_propensity(ds, LearnerSpec(), assign_folds(ds, 5, 0)).values
    np.testing.assert_array_equal(pi, 1.0)
    ds3 = ComparisonDataset(3, np.zeros((20, 1)), np.zeros(20), np.ones(20) * 0.5)
    with pytest.raises(DataError):
        fit_propensity(ds3, LearnerSpec(), assign_folds(ds3, 5, 0))


def test_categorical_density_ratio():
    X = np.r_[np.zeros(50), np.ones(50)][:, None]
    Xt = np.r_[np.zeros(40), np.ones(60)][:, None]
    ds = ComparisonDataset(3, X, np.arange(100) % 3, np.ones(100) * 0.5, Xt)
    w = fit_density_ratio(ds, LearnerSpec("cell_mean"), assign_folds(ds, 5, 0)).values
    np.testing.assert_allclose(w[:100], np.r_[np.full(50, 0.8), np.full(50, 1.2)], atol=1e-12)
    assert w[:100].mean() == pytest.approx(1.0, abs=1e-15)
    bad = ComparisonDataset(3, X, np.arange(100) % 3, np.ones(100) * 0.5, np.full((5, 1), 2.0))
    with pytest.raises(DataError, match="absolutely continuous"):
        fit_density_ratio(bad, LearnerSpec("cell_mean"), assign_folds(bad, 5, 0))


def test_density_ratio_without_shift():
    ds = gen_setting1(5000, 5000, 3, labeled_law="source")
    from covbt.simulation import gen_setting1 as g
    same = ComparisonDataset(3, ds.X, ds.pairs, ds.y, g(5000, 0, 4).X)
    w = fit_density_ratio(same, LearnerSpec(degree=2, interactions=True),
                          assign_folds(same, 5, 0)).values
    assert abs(w[:5000].mean() - 1) < 0.05
    assert np.all((w >= 1 / 20) & (w <= 20))


def test_density_ratio_reweights_to_target():
    from covbt.simulation import density_ratio
    ds = gen_setting1(20000, 20000, 5)
    w = density_ratio(ds.X)
    f = ds.X[:, 0] + ds.X[:, 1]
    src = np.mean(w * f)
    se = np.std(w * f) / np.sqrt(ds.n) + np.std(ds.X_target.sum(axis=1)) / np.sqrt(ds.m)
    assert abs(src - ds.X_target.sum(axis=1).mean()) < 4 * se


def test_estimate_nuisances_deterministic_and_bounded():
    ds = gen_setting1(600, 600, 2)
    spec = LearnerSpec(degree=2, interactions=True)
    b1 = estimate_nuisances(ds, spec, spec, spec, seed=4)
    b2 = estimate_nuisances(ds, spec, spec, spec, seed=4)
    np.testing.assert_array_equal(b1.outcome, b2.outcome)
    np.testing.assert_array_equal(b1.ratio, b2.ratio)
    assert b1.outcome.shape == (1200, 3) and b1.ratio.shape == (1200,)
    assert np.all((b1.outcome >= 0.01) & (b1.outcome <= 0.99))
    assert np.all(b1.propensity >= 0.01)
    assert b1.diagnostics["fold_seed"] == 4
    assert isinstance(b1, NuisanceBundle) and b1.observed.all()
