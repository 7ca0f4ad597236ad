import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from constructed import gat_traces
from oracles import auc_pairs, ridge_1d
from numunits.decoding import (
    ALPHA_GRID, DecodingError, LinearDecoder, auc, collect_features, depth_regression,
    gat_analysis, gat_matrix, group_folds, identify_sr_units, nested_ridge, ridge_fit,
    single_unit_codes, stratified_folds, units_excluding, weight_outliers, word_log_frequency,
)
from numunits.grammar import DepthConfig, Grammar, generate_depth_dataset, generate_na_task
from numunits.lstm import init_model
from numunits.units import UnitRef


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    assert auc([0.8, 0.6, 0.7, 0.2], [1, 0, 1, 0]) == auc_pairs([0.8, 0.6, 0.7, 0.2], [1, 0, 1, 0])
    with pytest.raises(DecodingError):
        auc([1, 2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=40))
def test_auc_equals_pair_counting(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [int(l) for _, l in pairs]
    if len(set(labels)) < 2:
        return
    assert auc(scores, labels) == auc_pairs(scores, labels)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000))
def test_auc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=30)
    y = np.r_[np.zeros(15, int), np.ones(15, int)]
    assert auc(s, y) == auc(np.exp(3 * s) + 2, y)


def test_folds():
    rng = np.random.default_rng(0)
    y = np.r_[np.zeros(23), np.ones(17)].astype(int)
    f = stratified_folds(y, 5, rng)
    for k in range(5):
        assert abs((f == k).sum() - 8) <= 1
        assert 3 <= y[f == k].sum() <= 4
    groups = np.repeat(np.arange(12), 3)
    g = group_folds(groups, 5, rng)
    for grp in range(12):
        assert len(set(g[groups == grp])) == 1


def test_decoder_separable_and_permuted():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    dec = LinearDecoder(seed=0).fit(X, y)
    assert auc(dec.decision_function(X), y) == 1.0
    yp = rng.permutation(y)
    Xt = np.tile(X[:, None, :], (1, 1, 1))
    g = gat_matrix(Xt, yp, 0, seed=0)
    assert 0.3 <= g.mean[0] <= 0.7


@pytest.mark.parametrize("backend", ["logistic", "ridge"])
def test_decoder_duplication_invariance(backend):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 3))
    y = (X @ [1.0, -0.5, 0.2] + rng.normal(0, 1, 60) > 0).astype(int)
    a = LinearDecoder(backend).fit(X, y, alpha=0.1)
    b = LinearDecoder(backend).fit(np.vstack([X, X]), np.r_[y, y], alpha=0.1)
    np.testing.assert_allclose(a.coef_, b.coef_, atol=1e-8)
    assert a.intercept_ == pytest.approx(b.intercept_, abs=1e-8)
    assert np.corrcoef(a.decision_function(X), b.decision_function(X))[0, 1] == pytest.approx(1.0)


def test_decoder_errors_and_warning():
    with pytest.raises(DecodingError):
        LinearDecoder().fit(np.ones((10, 2)), np.r_[np.zeros(5), np.ones(5)])
    with pytest.raises(DecodingError):
        LinearDecoder().fit(np.random.default_rng(0).normal(size=(10, 2)), np.zeros(10))
    X = np.random.default_rng(0).normal(size=(30, 2))
    y = np.r_[np.zeros(26), np.ones(4)].astype(int)
    with pytest.warns(UserWarning, match="imbalance"):
        LinearDecoder(alphas=(1.0,)).fit(X, y)
    with pytest.raises(DecodingError):
        LinearDecoder("svm").fit(X[:, :1] + np.arange(30)[:, None], np.r_[np.zeros(15), np.ones(15)])


def test_gat_stable_and_swap_codes():
    X, y = gat_traces(seed=0)
    stable = gat_matrix(X[:, :, :1], y, train_time=1, seed=0)
    assert np.all(stable.mean[1:] == 1.0)
    swap = gat_matrix(X[:, :, 1:], y, train_time=1, seed=0)
    assert swap.mean[1:4].min() >= 0.95
    assert swap.mean[4:].max() <= 0.05
    assert swap.per_split.shape == (5, 6)
    np.testing.assert_allclose(swap.sd, swap.per_split.std(0))
    again = gat_matrix(X[:, :, 1:], y, train_time=1, seed=0)
    np.testing.assert_array_equal(again.per_split, swap.per_split)
    assert len(stable.alphas) == 5 and stable.config["alpha_grid"] == list(ALPHA_GRID)


def test_gat_beats_permuted_baseline():
    X, y = gat_traces(seed=3, noise=0.8)
    real = gat_matrix(X[:, :, :1], y, 1, seed=0)
    perm = gat_matrix(X[:, :, :1], np.random.default_rng(0).permutation(y), 1, seed=0)
    assert real.diagonal >= perm.diagonal


def test_gat_errors():
    X, y = gat_traces()
    with pytest.raises(DecodingError):
        gat_matrix(X, y, train_time=9)
    with pytest.raises(DecodingError):
        gat_matrix(X, y[:-1], train_time=1)


def test_single_unit_codes():
    X, y = gat_traces(seed=1)
    const = np.zeros((len(y), X.shape[1], 1))
    feats = np.concatenate([X, const], axis=-1)
    units = [UnitRef(1, 1), UnitRef(1, 2), UnitRef(1, 3)]
    codes = single_unit_codes(feats, y, units, subject_t=1, intervener_t=4, end_t=5)
    stable, copy, flat = codes
    assert stable.auc_subject > 0.9 and not stable.swaps and not stable.sr
    assert copy.auc_subject > 0.9 and copy.swaps and copy.sr
    assert flat.auc_subject == 0.5 and not flat.sr
    # orientation does not depend on the sign of the code
    neg = single_unit_codes(-feats, y, units, 1, 4, 5)
    assert [c.sr for c in neg] == [c.sr for c in codes]


def test_model_feature_collection():
    m = init_model(Grammar().vocabulary(), embed_dim=4, hidden_dim=3, n_layers=2, seed=0)
    ss = generate_na_task("NounPP", n_per_condition=20, seed=0)
    inc = [s for s in ss if s.condition in ("SP", "PS")]
    X = collect_features(m, inc, [UnitRef(1, 2), UnitRef(2, 3)])
    assert X.shape == (40, 8, 2)
    g = gat_analysis(m, inc, units_excluding(m, [UnitRef(2, 3)]), seed=0, n_splits=4)
    assert g.train_time == 1 and g.tokens == list(inc[0].tokens)
    assert len(g.config["units"]) == 5
    codes = identify_sr_units(m, ss.stimuli)
    assert len(codes) == 6
    with pytest.raises(DecodingError):
        collect_features(m, inc + list(generate_na_task("Adv", n_per_condition=1)), [UnitRef(1, 1)])
    with pytest.raises(DecodingError):
        identify_sr_units(m, list(generate_na_task("Adv", n_per_condition=2)))


def test_ridge_three_point_closed_form():
    xs, ys = [0.0, 1.0, 3.0], [1.0, 2.0, 2.5]
    for alpha in (0.0, 0.5, 2.0):
        w, b = ridge_fit(np.array(xs)[:, None], ys, alpha)
        w0, b0 = ridge_1d(xs, ys, alpha)
        assert abs(w[0] - w0) < 1e-10 and abs(b - b0) < 1e-10


def test_ridge_recovers_exact_weights():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 6))
    w_true = rng.normal(size=6)
    y = X @ w_true + 0.7
    w, b = ridge_fit(X, y, 0.0)
    np.testing.assert_allclose(w, w_true, atol=1e-8)
    assert b == pytest.approx(0.7, abs=1e-8)


def test_nested_ridge_linear_and_permuted():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 10))
    y = X @ rng.normal(size=10)
    r2, alphas, folds, _ = nested_ridge(X, y, seed=0)
    assert min(r2) >= 0.999
    assert len(alphas) == 5 and set(folds) == set(range(5))
    r2p, *_ = nested_ridge(X, rng.permutation(y), seed=0)
    assert np.mean(r2p) <= 0.05
    with pytest.raises(DecodingError):
        nested_ridge(X[:3], y[:3])


def test_weight_outliers_injection():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        w = rng.normal(0, 0.1, 128)
        j = int(rng.integers(128))
        rest = np.delete(w, j)
        w[j] = rest.mean() + 10 * rest.std()
        assert weight_outliers(w, 3).tolist() == [j]
    assert weight_outliers(np.ones(5)).size == 0


def test_depth_regression_plumbing():
    m = init_model(Grammar().vocabulary(), embed_dim=4, hidden_dim=4, n_layers=2, seed=1)
    cfg = DepthConfig(min_len=2, max_len=8, sentences_per_length=40, position_range=(3, 4),
                      depth_range=(2, 3), points_per_cell=None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = generate_depth_dataset(cfg, seed=0)
    freq = word_log_frequency(ds.sentences)
    res = depth_regression(m, ds, freq, seed=0, alphas=(0.1, 1.0))
    assert len(res.weights) == 8
    assert len(res.r2_folds) == len(res.r2_corrected_folds) == len(res.r2_frequency_folds) == 5
    assert res.covariate and res.covariate_weight is not None
    flagged = [u for u, _ in res.outliers]
    assert set(flagged) == {res.units[i] for i in weight_outliers(res.weights, 3)}
    js = res.to_json()
    assert js["config"]["timestep"] == "word input step"
    plain = depth_regression(m, ds, None, seed=0, alphas=(0.1, 1.0))
    assert not plain.covariate and np.isnan(plain.delta_r2)
    again = depth_regression(m, ds, freq, seed=0, alphas=(0.1, 1.0))
    assert again.r2_folds == res.r2_folds
