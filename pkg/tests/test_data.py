import math
from importlib import resources

import numpy as np
import pytest
from scipy import integrate, stats

from entroherd.data import (
    LOG_ZERO_VALUE, WINE_COLUMNS, BimodalTarget, GaussianBaseline, MissingColumn, NonNumericCell,
    RangeSanityFail, auc, invert_preprocessing, load_wine, make_bimodal_target, make_boltzmann_instance,
    mh_sample_bimodal, quantile_coverage, read_wine_csv, split_train_validation,
)
from entroherd.families import Gauss1D
from entroherd.mixture import MixtureModel


def fixture_paths():
    root = resources.files("entroherd") / "fixtures"
    return root / "winequality-red.csv", root / "winequality-white.csv"


# -- bimodal target ------------------------------------------------------------

def test_energy_values():
    E = lambda x: float(BimodalTarget.log_unnormalized(x))
    assert E(0.0) == 0.0
    assert E(1.0) == 1.5


def test_target_normalized():
    t = make_bimodal_target()
    z, _ = integrate.quad(t.pdf, -4, 4, epsabs=1e-13, epsrel=1e-12, limit=200)
    assert z == pytest.approx(1.0, abs=1e-9)
    assert t.moment(0) == pytest.approx(1.0, abs=1e-9)


def test_mh_second_moment():
    x = mh_sample_bimodal(10**5, seed=3)
    y = x**2
    # batch means absorb the autocorrelation
    batches = y.reshape(100, -1).mean(axis=1)
    se = batches.std(ddof=1) / math.sqrt(100)
    assert abs(y.mean() - make_bimodal_target().moment(2)) <= 4 * se


def test_mh_determinism():
    np.testing.assert_array_equal(mh_sample_bimodal(500, seed=9), mh_sample_bimodal(500, seed=9))
    assert not np.array_equal(mh_sample_bimodal(500, seed=9), mh_sample_bimodal(500, seed=10))
    with pytest.raises(ValueError):
        mh_sample_bimodal(0)


def test_mh_chi_square_fit():
    n = 10**6
    x = mh_sample_bimodal(n, seed=1, thin=100, chains=10**4)
    assert x.size == n
    t = make_bimodal_target()
    edges = -4 + 0.1 * np.arange(81)
    p = np.array([integrate.quad(t.pdf, a, b)[0] for a, b in zip(edges[:-1], edges[1:])])
    counts = np.histogram(x, edges)[0]
    keep = n * p >= 5
    expected = p[keep] / p[keep].sum() * counts[keep].sum()
    assert stats.chisquare(counts[keep], expected).pvalue > 0.001


# -- Boltzmann instances -----------------------------------------------------------

def test_boltzmann_structure():
    for seed in range(5):
        W = make_boltzmann_instance(10, seed).coupling
        assert W[3, 4] == 0.0 and W[4, 3] == 0.0
        assert W[0, 1] == -0.3
        assert all(W[i, i + 1] == -0.3 for i in range(9) if i != 3)
        np.testing.assert_array_equal(W, W.T)
        assert not np.diag(W).any()
    np.testing.assert_array_equal(make_boltzmann_instance(10, 4).coupling, make_boltzmann_instance(10, 4).coupling)
    with pytest.raises(ValueError):
        make_boltzmann_instance(1)


def test_boltzmann_random_coupling_scale():
    iu = np.triu_indices(10, 2)
    vals = np.concatenate([make_boltzmann_instance(10, s).coupling[iu] for s in range(10**4)])
    assert vals.std() == pytest.approx(0.2 / math.sqrt(10), abs=0.002)
    assert abs(vals.mean()) < 0.002


# -- wine loading -------------------------------------------------------------------

def test_fixture_load_and_transforms():
    red, white = load_wine(*fixture_paths())
    raw = read_wine_csv(fixture_paths()[0])
    assert red.rows.shape == (50, 11) and white.rows.shape == (50, 11)
    assert red.var_names == list(WINE_COLUMNS)
    citric = WINE_COLUMNS.index("citric acid")
    assert np.all(red.rows[:3, citric] == LOG_ZERO_VALUE)
    assert red.preprocessing_log["variables"]["citric acid"]["zero_substitutions"] >= 3
    # fixed acidity is not log-transformed
    np.testing.assert_array_equal(red.rows[:, 0], raw[:, 0])
    assert not red.preprocessing_log["variables"]["fixed acidity"]["log10"]
    zero = raw[:, citric] == 0
    assert np.all(red.rows[zero, citric] == LOG_ZERO_VALUE)
    assert red.preprocessing_log["variables"]["citric acid"]["zero_substitutions"] == zero.sum()
    np.testing.assert_allclose(red.rows[~zero, citric], np.log10(raw[~zero, citric]))


def test_split_sizes_and_disjointness():
    rows = np.random.default_rng(0).normal(size=(4898, 11))
    from entroherd.data import Dataset
    ds = Dataset(rows, list(WINE_COLUMNS), {"variables": {n: {"log10": False} for n in WINE_COLUMNS}})
    train, val = split_train_validation(ds, 0.2, seed=0)
    assert val.n_rows == 979 and train.n_rows == 4898 - 979
    tr, va = train.preprocessing_log["split"]["rows"], val.preprocessing_log["split"]["rows"]
    assert not set(tr) & set(va) and len(set(tr) | set(va)) == 4898
    np.testing.assert_allclose(train.rows.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(train.rows.std(axis=0), 1, atol=1e-9)
    again, _ = split_train_validation(ds, 0.2, seed=0)
    np.testing.assert_array_equal(again.rows, train.rows)
    with pytest.raises(ValueError):
        split_train_validation(ds, 1.0)


def test_preprocessing_round_trip():
    red, _ = load_wine(*fixture_paths())
    raw = read_wine_csv(fixture_paths()[0])
    train, val = split_train_validation(red, 0.2, seed=1)
    for part in (train, val):
        idx = part.preprocessing_log["split"]["rows"]
        back = invert_preprocessing(part.rows, part.preprocessing_log)
        ok = raw[idx] > 0
        np.testing.assert_allclose(back[ok], raw[idx][ok], rtol=1e-9)


def _write(tmp_path, text):
    p = tmp_path / "w.csv"
    p.write_text(text)
    return p


def test_wine_read_errors(tmp_path):
    header = ";".join(f'"{c}"' for c in WINE_COLUMNS)
    good = "7.0;0.3;0.3;2.0;0.05;30;100;0.995;3.2;0.5;10.0"
    with pytest.raises(MissingColumn):
        read_wine_csv(_write(tmp_path, header.replace('"pH"', '"ph"') + "\n" + good + "\n"))
    with pytest.raises(NonNumericCell) as info:
        read_wine_csv(_write(tmp_path, header + "\n" + good + "\n" + good.replace("3.2", "abc") + "\n"))
    assert info.value.row == 3 and info.value.col == "pH"
    p = _write(tmp_path, header + "\n" + good.replace("7.0", "70.0", 1) + "\n")
    p2 = tmp_path / "w2.csv"
    p2.write_text(header + "\n" + good + "\n")
    with pytest.raises(RangeSanityFail):
        load_wine(p, p2)


# -- metrics ---------------------------------------------------------------------

def test_auc_examples():
    assert auc([2, 3], [1, 2]) == 0.875
    assert auc([5, 6, 7], [1, 2]) == 1.0
    assert auc([1, 2, 3], [1, 2, 3]) == 0.5
    with pytest.raises(ValueError):
        auc([], [1])


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(2)
    pos, neg = rng.integers(0, 10, 40), rng.integers(0, 10, 30)
    pairs = (pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()
    assert auc(pos, neg) == pytest.approx(pairs / (40 * 30), abs=1e-15)


def test_coverage_examples():
    m = MixtureModel([Gauss1D(1.0, math.log(2.0))])
    assert quantile_coverage([m], [1.0]) == 1.0
    assert quantile_coverage([m], [1.0 + 20.0]) == 0.0
    with pytest.raises(ValueError):
        quantile_coverage([m], [1.0, 2.0])


def test_coverage_calibration():
    rng = np.random.default_rng(6)
    conds, truths = [], []
    for _ in range(2000):
        m = MixtureModel([Gauss1D(rng.normal(), rng.normal(scale=0.3)) for _ in range(2)])
        conds.append(m)
        truths.append(m.sample(1, seed=rng)[0, 0])
    # callables with closed-form quantiles keep the 10^4-draw version fast
    from scipy.stats import norm
    for _ in range(8000):
        mu, s = rng.normal(), math.exp(rng.normal(scale=0.3))
        conds.append(lambda lo, hi, mu=mu, s=s: norm.ppf([lo, hi], mu, s))
        truths.append(rng.normal(mu, s))
    assert quantile_coverage(conds, truths) == pytest.approx(0.80, abs=0.02)


def test_gaussian_baseline():
    rng = np.random.default_rng(0)
    C = np.array([[1.0, 0.6, 0.1], [0.6, 2.0, -0.3], [0.1, -0.3, 0.5]])
    rows = rng.multivariate_normal([1.0, -1.0, 0.5], C, size=5000)
    g = GaussianBaseline(rows)
    np.testing.assert_allclose(g.log_density(rows[:5]),
                               stats.multivariate_normal(g.mean, g.cov).logpdf(rows[:5]), rtol=1e-12)
    obs = np.array([0.0, 0.7, 0.2])
    m, s = g.conditional(1, obs)
    # Schur complement oracle
    k = [0, 2]
    S12 = g.cov[1, k]
    S22 = g.cov[np.ix_(k, k)]
    want_m = g.mean[1] + S12 @ np.linalg.solve(S22, obs[k] - g.mean[k])
    want_v = g.cov[1, 1] - S12 @ np.linalg.solve(S22, S12)
    assert m == pytest.approx(want_m, rel=1e-10) and s == pytest.approx(math.sqrt(want_v), rel=1e-10)
