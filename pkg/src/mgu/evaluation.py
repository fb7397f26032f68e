"""Trade-off-of-unlearning metrics, edge membership inference and difficulty sets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .gcn import ModelParams, TrainConfig, accuracy, forward, train
from .graph import CENTRALITY_METRICS, Graph, RequestKind, UnlearnRequest, apply_request, centrality, hop_distances
from .rng import Stream


@dataclass
class EvalReport:
    task: str
    diff_deleted: float
    diff_remaining: float
    diff_test: float
    tou: float
    accuracies: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_diffs(cls, task, d_del, d_rem, d_test, accuracies=None, meta=None) -> "EvalReport":
        return cls(task, d_del, d_rem, d_test, tou_product(d_del, d_rem, d_test), accuracies or {}, meta or {})

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "diff_deleted": self.diff_deleted,
            "diff_remaining": self.diff_remaining,
            "diff_test": self.diff_test,
            "tou": self.tou,
            "accuracies": self.accuracies,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(
            doc["task"],
            doc["diff_deleted"],
            doc["diff_remaining"],
            doc["diff_test"],
            doc["tou"],
            doc.get("accuracies", {}),
            doc.get("meta", {}),
        )


def tou_product(*diffs: float) -> float:
    out = 1.0
    for d in diffs:
        out *= 1.0 - d
    return out


def diff_acc(params_u: ModelParams, params_r: ModelParams, graph_eval: Graph, node_set, labels=None) -> float:
    """``|acc(u) - acc(r)|`` on ``node_set``, both models fed ``graph_eval``."""
    return abs(
        accuracy(params_u, graph_eval, node_set, labels=labels) - accuracy(params_r, graph_eval, node_set, labels=labels)
    )


def _accs(params_u, params_r, graph, nodes, labels):
    au = accuracy(params_u, graph, nodes, labels=labels)
    ar = accuracy(params_r, graph, nodes, labels=labels)
    return au, ar, abs(au - ar)


def tou_node(
    params_u: ModelParams,
    params_r: ModelParams,
    graph_full: Graph,
    graph_remaining: Graph,
    request: UnlearnRequest,
) -> EvalReport:
    """ToU for node deletion.

    Deleted nodes are judged with both models fed the full graph (the
    nodes re-inserted); remaining training and test nodes on the remaining
    graph. Labels are the original ones throughout.
    """
    labels = graph_full.labels
    deleted = np.array(request.node_ids, dtype=np.int64)
    u_del, r_del, d_del = _accs(params_u, params_r, graph_full, deleted, labels)
    u_rem, r_rem, d_rem = _accs(params_u, params_r, graph_remaining, graph_remaining.train_nodes, labels)
    u_test, r_test, d_test = _accs(params_u, params_r, graph_remaining, graph_remaining.test_nodes, labels)
    accs = {
        "deleted": {"unlearned": u_del, "retrained": r_del},
        "remaining": {"unlearned": u_rem, "retrained": r_rem},
        "test": {"unlearned": u_test, "retrained": r_test},
    }
    return EvalReport.from_diffs("node", d_del, d_rem, d_test, accs)


# edge membership inference -------------------------------------------------------


def auc_score(pos: np.ndarray, neg: np.ndarray) -> float:
    """Probability a random positive outranks a random negative (ties count 1/2)."""
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def sample_negative_pairs(graph: Graph, count: int, seed: int) -> np.ndarray:
    """Uniform non-adjacent pairs ``u < v`` with both endpoints labeled."""
    labeled = np.flatnonzero(graph.labels >= 0)
    if len(labeled) < 2:
        raise ValueError("need at least two labeled nodes to sample negative pairs")
    stream = Stream(seed, "negative_pairs")
    out: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    max_pairs = len(labeled) * (len(labeled) - 1) // 2
    if count > max_pairs - graph.num_edges:
        raise ValueError("not enough non-edges to sample from")
    while len(out) < count:
        idx = stream.integers(len(labeled), 2 * (count - len(out)) + 2)
        for a, b in zip(idx[0::2], idx[1::2]):
            u, v = int(labeled[a]), int(labeled[b])
            if u == v:
                continue
            u, v = min(u, v), max(u, v)
            if (u, v) in seen or graph.has_edge(u, v):
                continue
            seen.add((u, v))
            out.append((u, v))
            if len(out) == count:
                break
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def pair_scores(probs: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Cosine similarity of the endpoints' posterior vectors."""
    a, b = probs[pairs[:, 0]], probs[pairs[:, 1]]
    return np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def edge_mia(params: ModelParams, graph_remaining: Graph, positive_edges, negative_pairs) -> float:
    """AUC of the posterior-similarity attack separating deleted edges from non-edges."""
    pos = np.asarray(positive_edges, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(negative_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("edge MIA needs non-empty positive and negative sets")
    probs = forward(params, graph_remaining).probs
    return auc_score(pair_scores(probs, pos), pair_scores(probs, neg))


def tou_edge(
    params_u: ModelParams,
    params_r: ModelParams,
    graph_full: Graph,
    graph_remaining: Graph,
    request: UnlearnRequest,
    seed: int = 0,
) -> EvalReport:
    """ToU for edge deletion; the forgetting term compares attack AUCs."""
    pos = np.array(request.edge_pairs, dtype=np.int64).reshape(-1, 2)
    neg = sample_negative_pairs(graph_full, len(pos), seed)
    auc_u = edge_mia(params_u, graph_remaining, pos, neg)
    auc_r = edge_mia(params_r, graph_remaining, pos, neg)
    labels = graph_full.labels
    u_rem, r_rem, d_rem = _accs(params_u, params_r, graph_remaining, graph_remaining.train_nodes, labels)
    u_test, r_test, d_test = _accs(params_u, params_r, graph_remaining, graph_remaining.test_nodes, labels)
    accs = {
        "mia_auc": {"unlearned": auc_u, "retrained": auc_r},
        "train": {"unlearned": u_rem, "retrained": r_rem},
        "test": {"unlearned": u_test, "retrained": r_test},
    }
    return EvalReport.from_diffs("edge", abs(auc_u - auc_r), d_rem, d_test, accs, {"negative_seed": seed})


def tou_feat(
    params_u: ModelParams,
    params_r: ModelParams,
    graph_full: Graph,
    graph_remaining: Graph,
    request: UnlearnRequest,
) -> EvalReport:
    """ToU for feature deletion.

    The forgetting term averages the owner-accuracy gap over two inputs:
    the full graph with original features, and the same features with all
    edges dropped.
    """
    owners = np.array(request.node_ids, dtype=np.int64)
    labels = graph_full.labels
    u_g, r_g, d_g = _accs(params_u, params_r, graph_full, owners, labels)
    u_0, r_0, d_0 = _accs(params_u, params_r, graph_full.without_edges(), owners, labels)
    d_del = (d_g + d_0) / 2.0
    u_rem, r_rem, d_rem = _accs(params_u, params_r, graph_remaining, graph_remaining.train_nodes, labels)
    u_test, r_test, d_test = _accs(params_u, params_r, graph_remaining, graph_remaining.test_nodes, labels)
    accs = {
        "deleted_with_structure": {"unlearned": u_g, "retrained": r_g},
        "deleted_without_structure": {"unlearned": u_0, "retrained": r_0},
        "train": {"unlearned": u_rem, "retrained": r_rem},
        "test": {"unlearned": u_test, "retrained": r_test},
    }
    return EvalReport.from_diffs("feature", d_del, d_rem, d_test, accs)


def evaluate(params_u, params_r, graph_full, request: UnlearnRequest, seed: int = 0) -> EvalReport:
    graph_rem = apply_request(graph_full, request)
    if request.kind is RequestKind.NODE:
        return tou_node(params_u, params_r, graph_full, graph_rem, request)
    if request.kind is RequestKind.EDGE:
        return tou_edge(params_u, params_r, graph_full, graph_rem, request, seed)
    return tou_feat(params_u, params_r, graph_full, graph_rem, request)


# difficulty-aware sampling -------------------------------------------------------------

SET_NAMES = ("low_mem", "high_mem", "random", "local", "distant")
SETTING_TO_SET = {"easy": "low_mem", "hard": "high_mem", "random": "random", "local": "local", "distant": "distant"}


def set_size(n_percent: float, population: int) -> int:
    # round first so 5% of 240 is 12, not 13 from float noise
    return int(math.ceil(round(n_percent * population / 100.0, 9)))


@dataclass
class DifficultySets:
    """Five equal-size deletion sets plus the full rankings they are cut from."""

    size: int
    rankings: dict  # name -> full ordered array of training nodes

    def __getattr__(self, name):
        if name in SET_NAMES:
            return self.rankings[name][: self.size]
        raise AttributeError(name)

    def get(self, name: str, count: int | None = None) -> np.ndarray:
        return self.rankings[name][: self.size if count is None else count]

    def to_dict(self) -> dict:
        return {name: self.get(name).tolist() for name in SET_NAMES}


def build_difficulty_sets(scores: np.ndarray, graph: Graph, test_set, n_percent: float, seed: int = 0) -> DifficultySets:
    """Rank training nodes by score, at random, and by hop distance to the test set.

    Ties break by node id; the high-score ranking is the exact reverse of
    the low-score one, so the two sets stay disjoint below 50%. Nodes with an undefined (``nan``) score are left
    out of the score rankings. Unreachable nodes count as farthest.
    """
    train_nodes = graph.train_nodes
    size = set_size(n_percent, len(train_nodes))
    s = np.asarray(scores, dtype=np.float64)[train_nodes]
    defined = ~np.isnan(s)
    cand, cs = train_nodes[defined], s[defined]
    low = cand[np.lexsort((cand, cs))]
    high = low[::-1]
    rnd = Stream(seed, "random_set").choice(train_nodes, len(train_nodes))
    dist = hop_distances(graph, np.asarray(list(test_set), dtype=np.int64))[train_nodes]
    # lexsort treats -inf as smallest, so unreachable nodes lead the distant ranking
    local = train_nodes[np.lexsort((train_nodes, dist))]
    distant = train_nodes[np.lexsort((train_nodes, -dist))]
    return DifficultySets(size, {"low_mem": low, "high_mem": high, "random": rnd, "local": local, "distant": distant})


def build_edge_sets(
    edges: np.ndarray, scores: np.ndarray, graph: Graph, test_set, n_percent: float, seed: int = 0
) -> DifficultySets:
    """Edge analogue of :func:`build_difficulty_sets`; rankings hold ``(u, v)`` rows.

    Score ties break by ``(u, v)``; an edge's distance to the test set is the
    nearer endpoint's.
    """
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    s = np.asarray(scores, dtype=np.float64)
    size = set_size(n_percent, len(e))
    defined = ~np.isnan(s)
    ce, cs = e[defined], s[defined]
    low = ce[np.lexsort((ce[:, 1], ce[:, 0], cs))]
    rnd = e[Stream(seed, "random_edge_set").permutation(len(e))]
    dist = hop_distances(graph, np.asarray(list(test_set), dtype=np.int64))
    d = np.minimum(dist[e[:, 0]], dist[e[:, 1]])
    local = e[np.lexsort((e[:, 1], e[:, 0], d))]
    distant = e[np.lexsort((e[:, 1], e[:, 0], -d))]
    return DifficultySets(size, {"low_mem": low, "high_mem": low[::-1], "random": rnd, "local": local, "distant": distant})


# trend experiments -------------------------------------------------------------------------


def generalization_impact(
    graph: Graph,
    sets: DifficultySets,
    ratios,
    train_cfg: TrainConfig,
    seeds=(0, 1, 2),
    set_names=SET_NAMES,
) -> list[dict]:
    """Test-accuracy change after retraining without a prefix of each ranking.

    For each ratio the first ``ceil(ratio * |train|)`` nodes of a ranking
    are deleted and the model retrained; the delta against the model trained
    on the full graph (same seed) is averaged over ``seeds``.
    """
    n_train = len(graph.train_nodes)
    base = {}
    for s in seeds:
        cfg = _with_seed(train_cfg, s)
        base[s] = accuracy(train(graph, cfg), graph, graph.test_nodes)
    rows = []
    for name in set_names:
        for ratio in ratios:
            k = set_size(100.0 * ratio, n_train)
            deltas = []
            for s in seeds:
                if k == 0:
                    deltas.append(0.0)
                    continue
                req = UnlearnRequest.nodes(sets.get(name, k))
                rem = apply_request(graph, req)
                acc = accuracy(train(rem, _with_seed(train_cfg, s)), rem, rem.test_nodes, labels=graph.labels)
                deltas.append(acc - base[s])
            rows.append(
                {
                    "set": name,
                    "ratio": ratio,
                    "deleted": k,
                    "delta_mean": float(np.mean(deltas)),
                    "delta_std": float(np.std(deltas)),
                    "deltas": deltas,
                }
            )
    return rows


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(cfg.hidden_dim, cfg.epochs, cfg.learning_rate, cfg.weight_decay, seed, cfg.optimizer)


def centrality_contrast(graph: Graph, sets: DifficultySets) -> list[dict]:
    """Mean centrality of the easy (low-mem) vs hard (high-mem) set per metric."""
    easy, hard = sets.low_mem, sets.high_mem
    rows = []
    for metric in CENTRALITY_METRICS:
        c = centrality(graph, metric)
        e, h = float(np.mean(c[easy])), float(np.mean(c[hard]))
        ratio = e / h if h != 0 else (1.0 if e == 0 else math.inf)
        rows.append({"metric": metric, "easy": e, "hard": h, "easy_over_hard": ratio})
    return rows


# plotting ---------------------------------------------------------------------------------


def histogram_svg(values, bins: int = 30, title: str = "", xlabel: str = "score") -> str:
    """Self-contained SVG histogram in a 600x400 viewBox."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    lo, hi = (float(v.min()), float(v.max())) if len(v) else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    left, right, top, bottom = 60.0, 580.0, 40.0, 350.0
    peak = max(int(counts.max()) if len(counts) else 0, 1)
    bw = (right - left) / bins
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 600 400" width="600" height="400">',
        '<rect x="0" y="0" width="600" height="400" fill="white"/>',
        f'<text x="300" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
    ]
    for i, c in enumerate(counts):
        h = (bottom - top) * c / peak
        parts.append(
            f'<rect x="{left + i * bw:.2f}" y="{bottom - h:.2f}" width="{bw - 1:.2f}" height="{h:.2f}" fill="#4477aa"/>'
        )
    parts += [
        f'<text x="{left}" y="{bottom + 18}" font-family="sans-serif" font-size="11">{lo:.3g}</text>',
        f'<text x="{right}" y="{bottom + 18}" text-anchor="end" font-family="sans-serif" font-size="11">{hi:.3g}</text>',
        f'<text x="300" y="{bottom + 38}" text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>',
        f'<text x="{left - 6}" y="{top + 4}" text-anchor="end" font-family="sans-serif" font-size="11">{peak}</text>',
        f'<text x="{left - 6}" y="{bottom}" text-anchor="end" font-family="sans-serif" font-size="11">0</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
