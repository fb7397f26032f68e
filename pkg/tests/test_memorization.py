import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgu.gcn import ModelParams, TrainConfig, init_params
from mgu.graph import SbmSpec, build_graph, gen_sbm
from mgu.memorization import (
    MemConfig,
    MemConfigError,
    MemTable,
    edge_difficulty,
    estimate_mem,
    estimate_mem_exact,
    estimate_mem_subsample,
    feature_difficulty,
    margin_proxy_difficulty,
    neighbor_weights,
    node_difficulty,
    row_feature_difficulty,
)

FAST = TrainConfig(hidden_dim=16, epochs=100)


def oracle_graph(seed=0):
    """20-node two-block SBM with the first training node's label flipped."""
    g = gen_sbm(SbmSpec(blocks=(10, 10), p_in=0.5, p_out=0.05, feat_dim=8, mean_shift=1.5, seed=seed))
    v = int(g.train_nodes[0])
    labels = g.labels.copy()
    labels[v] = 1 - labels[v]
    return build_graph(g.num_nodes, g.edge_list(), g.features, labels, g.train_mask, g.test_mask, 2), v


@pytest.fixture(scope="module")
def oracle_table():
    g, v = oracle_graph(0)
    return g, v, estimate_mem_exact(g, MemConfig(), TrainConfig(seed=0))


# -- neighbor weights ------------------------------------------------------------


def test_weights_single_neighbor():
    g = build_graph(3, [(0, 1)], np.zeros((3, 1)))
    assert neighbor_weights(g, 0, 2, 0.5) == {1: 1.0}


def test_weights_two_hops():
    g = build_graph(3, [(0, 1), (1, 2)], np.zeros((3, 1)))
    w = neighbor_weights(g, 0, 2, 0.5)
    assert w[1] == pytest.approx(2 / 3) and w[2] == pytest.approx(1 / 3)


def test_weights_beta_one_uniform():
    g = build_graph(5, [(0, 1), (1, 2), (2, 3), (0, 4)], np.zeros((5, 1)))
    w = neighbor_weights(g, 0, 2, 1.0)
    assert set(w) == {1, 2, 4}
    assert all(x == pytest.approx(1 / 3) for x in w.values())


def test_weights_isolated_is_empty():
    g = build_graph(3, [(1, 2)], np.zeros((3, 1)))
    assert neighbor_weights(g, 0, 2, 0.5) == {}


def test_weights_restricted_set_renormalized():
    g = build_graph(3, [(0, 1), (1, 2)], np.zeros((3, 1)))
    w = neighbor_weights(g, 0, 2, 0.5, among=np.array([True, False, True]))
    assert w == {2: 1.0}


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10**6), st.floats(0.05, 1.0), st.integers(1, 3))
def test_weights_sum_to_one(n, seed, beta, k):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < 0.3
    g = build_graph(n, list(zip(iu[keep], ju[keep])), np.zeros((n, 1)))
    w = neighbor_weights(g, 0, k, beta)
    if w:
        assert abs(sum(w.values()) - 1.0) < 1e-12


# -- exact estimator ---------------------------------------------------------------


def test_flipped_node_is_most_memorized(oracle_table):
    g, v, tab = oracle_table
    i = int(np.flatnonzero(tab.node_ids == v)[0])
    assert tab.mem[i] == tab.mem.max()
    assert np.all(np.delete(tab.mem, i) < tab.mem[i])


def test_mem_is_a_probability(oracle_table):
    _, _, tab = oracle_table
    assert np.all((tab.mem >= 0) & (tab.mem <= 1))
    assert np.all((tab.delta_nbr >= 0) & (tab.delta_nbr <= 1))


def test_table_covers_training_nodes(oracle_table):
    g, _, tab = oracle_table
    np.testing.assert_array_equal(tab.node_ids, g.train_nodes)
    np.testing.assert_allclose(tab.mem, 0.5 * tab.delta_self + 0.5 * tab.delta_nbr)


def test_alpha_one_collapses_to_self_term():
    g, _ = oracle_graph(1)
    tab = estimate_mem_exact(g, MemConfig(alpha=1.0, num_seeds=2), FAST)
    np.testing.assert_array_equal(tab.mem, np.abs(tab.delta_self))


def test_exact_is_deterministic_across_workers():
    g, _ = oracle_graph(2)
    cfg = MemConfig(num_seeds=2)
    a = estimate_mem_exact(g, cfg, FAST, workers=1)
    b = estimate_mem_exact(g, cfg, FAST, workers=2)
    assert a.to_csv() == b.to_csv()


def test_node_removal_mode_runs():
    g, _ = oracle_graph(0)
    tab = estimate_mem_exact(g, MemConfig(num_seeds=1, exclusion_mode="node_removal"), FAST)
    assert np.all((tab.mem >= 0) & (tab.mem <= 1))


def test_zero_seeds_is_config_error():
    g, _ = oracle_graph(0)
    with pytest.raises(MemConfigError):
        estimate_mem_exact(g, MemConfig(num_seeds=0), FAST)


def test_table_csv_roundtrip(oracle_table):
    _, _, tab = oracle_table
    back = MemTable.from_csv(tab.to_csv(), tab.metadata_json())
    assert back.to_csv() == tab.to_csv()
    assert back.meta["estimator"] == "exact_loo"


# -- subsample estimator ----------------------------------------------------------------


def test_subsample_too_few_models():
    g, _ = oracle_graph(0)
    with pytest.raises(MemConfigError):
        estimate_mem_subsample(g, MemConfig(estimator="subsample", num_subsample_models=5), FAST)


def test_subsample_keep_everything_points_to_exact():
    g, _ = oracle_graph(0)
    cfg = MemConfig(estimator="subsample", num_subsample_models=10, subsample_keep_frac=1.0)
    with pytest.raises(MemConfigError, match="exact_loo"):
        estimate_mem(g, cfg, FAST)


def test_subsample_deterministic_and_bounded():
    g, _ = oracle_graph(0)
    cfg = MemConfig(estimator="subsample", num_subsample_models=20)
    a = estimate_mem(g, cfg, FAST)
    b = estimate_mem(g, cfg, FAST, workers=2)
    assert a.to_csv() == b.to_csv()
    ok = ~np.isnan(a.mem)
    assert np.all((a.mem[ok] >= 0) & (a.mem[ok] <= 1))


# -- difficulty --------------------------------------------------------------------------


def test_node_difficulty_is_mem():
    tab = MemTable(np.array([0, 2]), np.array([0.3, np.nan]), np.array([0.3, np.nan]), np.array([0.3, np.nan]), 0.5)
    s = node_difficulty(tab, 4)
    assert s[0] == 0.3 and np.isnan(s[2]) and np.isnan(s[1])


def test_edge_difficulty_example():
    # u=0 has degree 4, v=1 has degree 1
    g = build_graph(6, [(0, 1), (0, 2), (0, 3), (0, 4)], np.zeros((6, 1)))
    s = np.zeros(6)
    s[0], s[1] = 0.5, 0.2
    _, d = edge_difficulty(g, s, [(0, 1)])
    assert d[0] == pytest.approx(0.45)
    _, d2 = edge_difficulty(g, s, [(1, 0)])
    assert d2[0] == d[0]
    _, d3 = edge_difficulty(g, np.zeros(6), [(0, 1)])
    assert d3[0] == 0


def test_edge_difficulty_missing_policy():
    g = build_graph(3, [(0, 1)], np.zeros((3, 1)))
    s = np.array([0.4, np.nan, 0.0])
    assert edge_difficulty(g, s)[1][0] == pytest.approx(0.4)
    assert np.isnan(edge_difficulty(g, s, missing="skip")[1][0])


def test_feature_difficulty_examples():
    g = build_graph(3, [], np.zeros((3, 1)), [0, 0, 0]).with_masks([True, True, True], [False] * 3)
    s = np.array([0.7, 0.2, 0.4])
    assert feature_difficulty(g, s, {"a": [0]})["a"] == pytest.approx(0.7)
    assert feature_difficulty(g, s, {"b": [1, 2]})["b"] == pytest.approx(0.3)
    assert feature_difficulty(g, s, {"b": [1, 2, 2]})["b"] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        feature_difficulty(g, s, {"c": []})
    np.testing.assert_allclose(row_feature_difficulty(g, s), s)


def test_margin_proxy_uniform_posteriors_give_zero():
    g, _ = oracle_graph(0)
    p = init_params(g.feat_dim, 4, 2, 0)
    flat = ModelParams(p.W1, p.b1, np.zeros_like(p.W2), np.zeros_like(p.b2))
    s = margin_proxy_difficulty(flat, g).scores
    np.testing.assert_allclose(s[g.train_nodes], 0.0, atol=1e-15)
    assert np.all(np.isnan(s[g.test_nodes]))


def test_margin_proxy_orientation():
    g, _ = oracle_graph(0)
    p = init_params(g.feat_dim, 4, 2, 3)
    a = margin_proxy_difficulty(p, g)
    b = margin_proxy_difficulty(p, g, "negated")
    np.testing.assert_array_equal(a.scores[g.train_nodes], -b.scores[g.train_nodes])
    np.testing.assert_array_equal(a.scores, margin_proxy_difficulty(p, g).scores)


@pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(beta=0.0), dict(k_hops=0), dict(estimator="x")])
def test_config_validation(kw):
    with pytest.raises(MemConfigError):
        MemConfig(**kw)
