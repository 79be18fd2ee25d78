import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatial_iml.datastore import standardize
from spatial_iml.errors import ConfigError, DataError
from spatial_iml.gbt import GbtModel, Hyperparams, Tree, fit_gbt, sample_rashomon, stratified_folds
from spatial_iml.importance import (REPORT_COLUMNS, RankTable, aggregate_ranks, cmr_importance,
                                    conditional_imputer, ensemble_importance, loco_importance,
                                    permutation_importance, prune_correlated, rank_descending,
                                    shap_importance, shap_values)

from conftest import small_synth
from oracles import brute_force_shapley


def random_ensemble(rng, p, n_trees, depth, n=120):
    X = rng.standard_normal((n, p))
    y = X @ rng.standard_normal(p) + np.sin(3 * X[:, 0]) + 0.1 * rng.standard_normal(n)
    hp = Hyperparams(n_estimators=n_trees, max_depth=depth, learning_rate=0.3,
                     subsample=0.8, min_samples_leaf=3)
    return fit_gbt(X, y, hp, seed=int(rng.integers(1000))), X


def test_shap_matches_brute_force(rng):
    m, X = random_ensemble(rng, 5, 6, 3)
    bg = X[:20]
    phi, base = shap_values(m, X[:8], background=bg)
    for i in range(8):
        ref, ref_base = brute_force_shapley(m.predict, X[i], bg)
        assert np.max(np.abs(phi[i] - ref)) < 1e-8
        assert base == pytest.approx(ref_base, abs=1e-12)
        assert phi[i].sum() + base == pytest.approx(m.predict(X[i:i + 1])[0], abs=1e-8)


def test_zero_tree_shap():
    m = GbtModel((), 0.1, 3.0, Hyperparams(), 0, 4)
    phi, base = shap_values(m, np.ones((5, 4)), background=np.zeros((3, 4)))
    assert np.all(phi == 0) and base == 3.0


def test_single_stump_closed_form():
    t, a, b = 0.5, -2.0, 5.0
    tree = Tree([0, -1, -1], [t, 0, 0], [1, -1, -1], [2, -1, -1], [0, a, b], [2, 1, 1], [1, 0, 0])
    m = GbtModel((tree,), 1.0, 0.0, Hyperparams(), 0, 3)
    bg = np.array([[0.1, 0, 0], [0.2, 0, 0], [0.9, 0, 0], [0.3, 1, 1]])
    rho = 3 / 4
    phi, _ = shap_values(m, np.array([[0.7, 9.0, -9.0]]), background=bg)
    assert phi[0, 0] == pytest.approx(b - (rho * a + (1 - rho) * b))
    assert phi[0, 1] == 0.0 and phi[0, 2] == 0.0


def test_unused_feature_has_zero_shap(rng):
    X = rng.standard_normal((200, 3))
    y = X[:, 0] + X[:, 2]
    X[:, 1] = 0.0  # constant column never splits
    m = fit_gbt(X, y, Hyperparams(n_estimators=10), 0)
    assert 1 not in m.used_features()
    phi, _ = shap_values(m, X[:30], background=X[30:60])
    assert np.all(phi[:, 1] == 0.0)


def test_shap_empty_background_rejected(rng):
    m, X = random_ensemble(rng, 3, 2, 2)
    with pytest.raises(ConfigError):
        shap_values(m, X[:2], background=X[:0])


def test_permutation_constant_and_unused(rng):
    X = rng.standard_normal((300, 3))
    X[:, 2] = 1.5
    y = 2 * X[:, 0] + 0.1 * rng.standard_normal(300)
    m = fit_gbt(X[:, :1], y, Hyperparams(n_estimators=30), 0)
    wrapped = GbtModel(m.trees, m.learning_rate, m.base_score, m.hyperparams, 0, 3)
    imp = permutation_importance(wrapped, X, y, repeats=5, seed=0)
    assert imp[1] == 0.0
    assert imp[2] == 0.0
    assert imp[0] > 0.5


def test_loco_duplicate_copies_and_noise(rng):
    n = 600
    X = rng.standard_normal((n, 3))
    X = np.column_stack([X[:, 0], X[:, 0], X[:, 1], X[:, 2]])
    y = 2 * X[:, 0] + X[:, 2] + 0.3 * rng.standard_normal(n)
    folds = stratified_folds(np.zeros(n), 5, 0)
    hp = Hyperparams(n_estimators=100, max_depth=3)
    imp = loco_importance(X, y, hp, 0, folds)
    assert abs(imp[0]) <= 0.01 and abs(imp[1]) <= 0.01
    assert imp[2] > 0.05
    joint = loco_importance(X, y, hp, 0, folds, groups=[[0, 1]])
    assert joint[0] >= 0.2
    # the noise column stays within the fold-score noise floor
    reps = [loco_importance(X, y + 0.05 * np.random.default_rng(s).standard_normal(n), hp, s,
                            stratified_folds(np.zeros(n), 5, s), groups=[[3]])[0]
            for s in range(4)]
    assert abs(imp[3]) <= max(2 * np.std(reps), 0.01)


def test_conditional_imputer_exact_reconstruction(rng):
    Z = rng.standard_normal((400, 2))
    X = np.column_stack([Z, Z[:, 0] - 2 * Z[:, 1]])
    y = X[:, 2] + 0.1 * rng.standard_normal(400)
    m = fit_gbt(X, y, Hyperparams(n_estimators=30), 0)
    imp = cmr_importance(m, X, y, seed=0, repeats=3)
    assert abs(imp[2]) < 1e-8


def test_cmr_independent_feature_matches_permutation():
    d, _ = small_synth(n=2000, p=5, n_districts=10, active={0: 1.5, 1: 1.0}, rho=0.0,
                       noise_sd=0.5)
    X = np.asarray(d.features)
    y = d.outcome("o_y")
    m = fit_gbt(X, y, Hyperparams(n_estimators=100), 0)
    perm = permutation_importance(m, X, y, repeats=10, seed=1)
    cmr = cmr_importance(m, X, y, seed=1, repeats=10)
    assert abs(cmr[0] - perm[0]) <= 0.02
    assert abs(cmr[1] - perm[1]) <= 0.02


def test_rank_descending_ties_and_nan():
    assert list(rank_descending([3.0, 1.0, 3.0, np.nan])) == [1.5, 3.0, 1.5, 4.0]


def test_table2_ranks_reproduce_order():
    feats = ["NO2", "skin reservoir content", "thermal radiation"]
    ranks = {"permutation": [1, 5, 2], "shap": [2, 4, 3], "loco": [1, 3, 5], "cmr": [1, 3, 6]}
    t = aggregate_ranks([RankTable.from_ranks(feats, ranks, k=10)])
    assert list(t.mean_rank) == [1.25, 3.75, 4.0]
    assert t.ordered == feats


def test_single_model_single_metric_identity():
    t = RankTable.from_scores(["a", "b", "c"], {"shap": [0.1, 0.5, 0.2]})
    agg = aggregate_ranks([t])
    assert list(agg.ranks["shap"]) == list(t.ranks["shap"])
    assert list(agg.mean_rank) == [3.0, 1.0, 2.0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=4, max_size=4), min_size=1, max_size=6),
       st.randoms())
def test_aggregate_depends_on_multiset_only(score_rows, r):
    feats = ["a", "b", "c", "d"]
    tables = [RankTable.from_scores(feats, {"permutation": s, "shap": s[::-1]}) for s in score_rows]
    shuffled = tables[:]
    r.shuffle(shuffled)
    a1, a2 = aggregate_ranks(tables), aggregate_ranks(shuffled)
    assert np.array_equal(a1.mean_rank, a2.mean_rank)
    assert a1.top_k == a2.top_k


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=8), st.randoms())
def test_rank_permutation_equivariant(scores, r):
    feats = [f"f{i}" for i in range(len(scores))]
    perm = list(range(len(scores)))
    r.shuffle(perm)
    t1 = RankTable.from_scores(feats, {"shap": scores})
    t2 = RankTable.from_scores([feats[i] for i in perm], {"shap": [scores[i] for i in perm]})
    for j, i in enumerate(perm):
        assert t2.ranks["shap"][j] == t1.ranks["shap"][i]


def test_aggregate_mismatched_features():
    a = RankTable.from_scores(["x", "y"], {"shap": [1, 2]})
    b = RankTable.from_scores(["x", "z"], {"shap": [1, 2]})
    with pytest.raises(DataError, match="y"):
        aggregate_ranks([a, b])


def test_top_k_tie_is_alphabetical():
    t = RankTable.from_scores(["b", "a", "c"], {"shap": [1.0, 1.0, 0.0]}, k=1)
    assert t.top_k == ("a",)


def _corr_dataset(cols):
    d, _ = small_synth(n=len(cols[0]), p=len(cols), n_districts=2, active={0: 1.0})
    from dataclasses import replace
    return replace(d, features=np.column_stack(cols))


def test_prune_divorced_variants(rng):
    a = rng.standard_normal(500)
    b = 0.95 * a + np.sqrt(1 - 0.95 ** 2) * rng.standard_normal(500)
    others = [rng.standard_normal(500) for _ in range(7)]
    d = _corr_dataset(others + [a, b])
    names = list(d.feature_names)
    kept = prune_correlated(d, names, 0.8)
    assert names[7] in kept and names[8] not in kept


def test_prune_chain(rng):
    z1, z2 = rng.standard_normal(2000), rng.standard_normal(2000)
    a = z1
    c = 0.3 * z1 + np.sqrt(1 - 0.09) * z2
    b = (a + c) / np.std(a + c)
    # corr(a, b) and corr(b, c) both ~ 0.8; scale a-c correlation down to 0.3
    r_ab = np.corrcoef(a, b)[0, 1]
    assert r_ab > 0.8 and np.corrcoef(b, c)[0, 1] > 0.8 and abs(np.corrcoef(a, c)[0, 1]) < 0.4
    d = _corr_dataset([a, b, c])
    names = list(d.feature_names)
    assert prune_correlated(d, names, 0.8) == [names[0], names[2]]


def test_prune_uncorrelated_is_identity_and_subset(rng):
    d = _corr_dataset([rng.standard_normal(300) for _ in range(5)])
    names = list(d.feature_names)
    order = [names[i] for i in (3, 0, 4, 1, 2)]
    assert prune_correlated(d, order, 0.8) == order
    with pytest.raises(ConfigError):
        prune_correlated(d, order, 1.0)


def test_ensemble_importance_report():
    d, _ = small_synth(n=800, p=6, n_districts=8, active={0: 2.0, 1: 1.0})
    z, _ = standardize(d)
    ens = sample_rashomon(z, "o_y", Hyperparams(n_estimators=30, max_depth=2), k=3, eps=1.0)
    tables, agg = ensemble_importance(ens, np.asarray(z.features), z.outcome("o_y"),
                                      z.feature_names, z.district_id, loco_members=2, repeats=3,
                                      max_background=32, max_explain=64, k=4)
    assert len(tables) == 3
    assert agg.ordered[:2] == [z.feature_names[0], z.feature_names[1]]
    df = agg.to_frame()
    assert list(df.columns) == REPORT_COLUMNS
    assert df.feature.iloc[0] == z.feature_names[0]
    assert df.kept_after_pruning.sum() == 4
