import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgu.gcn import ModelParams, TrainConfig, forward, init_params, train
from mgu.graph import SbmSpec, UnlearnRequest, apply_request, build_graph, gen_sbm
from mgu.evaluation import (
    EvalReport,
    auc_score,
    build_difficulty_sets,
    centrality_contrast,
    diff_acc,
    edge_mia,
    evaluate,
    generalization_impact,
    histogram_svg,
    sample_negative_pairs,
    set_size,
    tou_feat,
    tou_product,
)


@pytest.fixture(scope="module")
def setup():
    g = gen_sbm(SbmSpec(blocks=(20, 20, 20), p_in=0.25, p_out=0.02, feat_dim=8, mean_shift=1.5, seed=3))
    cfg = TrainConfig(hidden_dim=16, epochs=60)
    return g, cfg, train(g, cfg), train(g, TrainConfig(hidden_dim=16, epochs=60, seed=9))


def test_tou_examples():
    assert tou_product(0.1, 0.0, 0.0) == pytest.approx(0.9)
    assert tou_product(0.1, 0.1, 0.1) == pytest.approx(0.729)
    assert tou_product(0.1, 0.05, 0.05) == pytest.approx(0.81225)  # 0.8123 to four places
    assert tou_product(0.2, 0, 0) == pytest.approx(0.8)


def test_identical_models_have_unit_tou(setup):
    g, _, p, _ = setup
    for req in (
        UnlearnRequest.nodes(g.train_nodes[:3]),
        UnlearnRequest.edges(g.edge_list()[:3]),
        UnlearnRequest.features(g.train_nodes[:3]),
    ):
        assert evaluate(p, p, g, req).tou == 1.0


def test_tou_symmetric_and_bounded(setup):
    g, _, p, q = setup
    for req in (UnlearnRequest.nodes(g.train_nodes[:6]), UnlearnRequest.edges(g.edge_list()[:6])):
        a, b = evaluate(p, q, g, req), evaluate(q, p, g, req)
        assert a.tou == b.tou
        assert 0.0 <= a.tou <= 1.0


def test_diff_acc_empty_set_is_zero(setup):
    g, _, p, q = setup
    assert diff_acc(p, q, g, []) == 0.0


def test_diff_acc_example():
    # node 0 has feature 1, node 1 feature -1; one model is right on both, the other on one
    g = build_graph(2, [], np.array([[1.0], [-1.0]]), [0, 1])
    right = ModelParams(np.array([[1.0]]), np.zeros(1), np.array([[1.0, -1.0]]), np.array([0.0, 0.5]))
    assert forward(right, g).predictions().tolist() == [0, 1]
    one = ModelParams(np.array([[1.0]]), np.zeros(1), np.array([[1.0, -1.0]]), np.array([0.0, -0.5]))
    assert diff_acc(right, one, g, [0, 1]) == pytest.approx(0.5)


# a coarse grid keeps distinct scores distinct after exp
GRID = st.integers(-50, 50).map(lambda i: i / 10)


def test_auc_examples():
    assert auc_score([0.9, 0.8], [0.7, 0.1]) == 1.0
    assert auc_score([0.5, 0.5], [0.5, 0.5]) == 0.5
    assert auc_score([0.1], [0.9]) == 0.0
    with pytest.raises(ValueError):
        auc_score([], [0.1])


@settings(max_examples=200, deadline=None)
@given(st.lists(GRID, min_size=1, max_size=12), st.lists(GRID, min_size=1, max_size=12))
def test_auc_matches_pair_count_and_is_monotone_invariant(pos, neg):
    pairs = [(1.0 if a > b else 0.5 if a == b else 0.0) for a in pos for b in neg]
    assert auc_score(pos, neg) == pytest.approx(sum(pairs) / len(pairs), abs=1e-12)
    assert auc_score(np.exp(pos), np.exp(neg)) == pytest.approx(auc_score(pos, neg), abs=1e-12)


def test_negative_pairs_are_non_edges(setup):
    g, *_ = setup
    neg = sample_negative_pairs(g, 25, seed=1)
    assert len(neg) == 25 and len({tuple(x) for x in neg.tolist()}) == 25
    assert all(not g.has_edge(u, v) and u < v for u, v in neg)
    np.testing.assert_array_equal(neg, sample_negative_pairs(g, 25, seed=1))


def test_edge_mia_requires_pairs(setup):
    g, _, p, _ = setup
    with pytest.raises(ValueError):
        edge_mia(p, g, [], [(0, 1)])


def test_edge_tou_deterministic_per_seed(setup):
    g, _, p, q = setup
    req = UnlearnRequest.edges(g.edge_list()[:8])
    assert evaluate(p, q, g, req, seed=4).to_json() == evaluate(p, q, g, req, seed=4).to_json()


def test_feature_tou_averages_two_settings(setup):
    g, _, p, q = setup
    req = UnlearnRequest.features(g.train_nodes[:10])
    rep = tou_feat(p, q, g, apply_request(g, req), req)
    a = rep.accuracies
    d1 = abs(a["deleted_with_structure"]["unlearned"] - a["deleted_with_structure"]["retrained"])
    d0 = abs(a["deleted_without_structure"]["unlearned"] - a["deleted_without_structure"]["retrained"])
    assert rep.diff_deleted == pytest.approx((d1 + d0) / 2)


def test_structure_free_setting_ignores_other_rows(setup):
    g, _, p, _ = setup
    bare = g.without_edges()
    x = g.features.copy()
    x[1:] += 7.0
    before = forward(p, bare).probs[0]
    after = forward(p, bare.with_features(x)).probs[0]
    np.testing.assert_array_equal(before, after)


def test_report_roundtrip(setup):
    g, _, p, q = setup
    rep = evaluate(p, q, g, UnlearnRequest.nodes(g.train_nodes[:4]))
    back = EvalReport.from_dict(json.loads(rep.to_json()))
    assert back.to_json() == rep.to_json()


# -- difficulty sets ------------------------------------------------------------------------


def test_set_size_examples():
    assert set_size(10, 20) == 2
    assert set_size(5, 240) == 12
    assert set_size(5, 2166) == 109


def test_low_mem_lowest_ids_for_increasing_scores():
    n = 20
    g = build_graph(n, [(i, i + 1) for i in range(n - 1)], np.zeros((n, 1)), [0] * n)
    g = g.with_masks(np.arange(n) < 20, np.zeros(n, bool))
    sets = build_difficulty_sets(np.arange(n, dtype=float), g, [], 10)
    assert sets.low_mem.tolist() == [0, 1]
    assert sets.high_mem.tolist() == [19, 18]
    # tied scores: the high ranking reverses the low one
    tied = build_difficulty_sets(np.zeros(n), g, [], 10)
    assert tied.low_mem.tolist() == [0, 1] and tied.high_mem.tolist() == [19, 18]


def test_local_ties_broken_by_id():
    # star: every leaf touches the test hub
    g = build_graph(11, [(0, i) for i in range(1, 11)], np.zeros((11, 1)), [0] * 11)
    train_mask = np.arange(11) > 0
    g = g.with_masks(train_mask, ~train_mask)
    sets = build_difficulty_sets(np.zeros(11), g, [0], 20)
    assert sets.local.tolist() == [1, 2]
    assert sets.low_mem.tolist() == [1, 2]


def test_unreachable_nodes_are_most_distant():
    g = build_graph(6, [(0, 1), (1, 2), (4, 5)], np.zeros((6, 1)), [0] * 6)
    train_mask = np.array([False, True, True, True, True, True])
    g = g.with_masks(train_mask, ~train_mask)
    sets = build_difficulty_sets(np.zeros(6), g, [0], 60)
    assert sets.distant.tolist() == [3, 4, 5]
    assert sets.local.tolist() == [1, 2, 3]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(1, 49))
def test_low_high_disjoint_and_pure(seed, pct):
    g = gen_sbm(SbmSpec(blocks=(15, 15), p_in=0.2, p_out=0.05, seed=seed % 100))
    scores = np.random.default_rng(seed).random(g.num_nodes).round(1)
    a = build_difficulty_sets(scores, g, g.test_nodes, pct, seed=seed)
    b = build_difficulty_sets(scores, g, g.test_nodes, pct, seed=seed)
    assert a.to_dict() == b.to_dict()
    assert not set(a.low_mem.tolist()) & set(a.high_mem.tolist())
    assert all(len(v) == a.size for v in a.to_dict().values())


def test_centrality_identical_sets_ratio_one(setup):
    g, *_ = setup
    nodes = g.train_nodes
    sets = build_difficulty_sets(np.zeros(g.num_nodes), g, g.test_nodes, 10)
    sets.rankings["high_mem"] = sets.rankings["low_mem"]
    rows = centrality_contrast(g, sets)
    assert [r["metric"] for r in rows] == ["degree", "pagerank", "kcore"]
    assert all(r["easy_over_hard"] == 1.0 for r in rows)
    assert len(nodes)


def test_generalization_ratio_zero_is_zero(setup):
    g, cfg, *_ = setup
    sets = build_difficulty_sets(np.arange(g.num_nodes, dtype=float), g, g.test_nodes, 10)
    rows = generalization_impact(g, sets, [0.0, 0.05], cfg, seeds=(0,), set_names=("low_mem",))
    assert rows[0]["delta_mean"] == 0.0 and rows[0]["deleted"] == 0
    assert rows[1]["deleted"] == set_size(5, len(g.train_nodes))


def test_histogram_svg_is_wellformed():
    svg = histogram_svg(np.r_[np.zeros(30), np.linspace(0, 1, 10)], title="mem <scores>")
    root = ET.fromstring(svg)
    assert root.get("viewBox") == "0 0 600 400"
    assert len(root.findall("{http://www.w3.org/2000/svg}rect")) == 31
    assert histogram_svg([1.0, 1.0]) == histogram_svg([1.0, 1.0])


def test_eval_on_unused_model_has_bounded_tou(setup):
    g, _, p, _ = setup
    fresh = init_params(g.feat_dim, 16, g.num_classes, 0)
    rep = evaluate(fresh, p, g, UnlearnRequest.nodes(g.train_nodes[:5]))
    assert 0.0 <= rep.tou <= 1.0
