"""Per-node memorization scores and the unlearning difficulty built on them.

``mem(v) = alpha * |delta_self(v)| + (1 - alpha) * delta_nbr(v)`` where
``delta_self`` is the change in the probability of predicting ``v``
correctly when ``v`` leaves the training set, and ``delta_nbr`` is the same
change on ``v``'s k-hop training neighbors, weighted by ``beta ** hops``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.sparse import csgraph

from .gcn import ModelParams, Propagation, TrainConfig, forward, train
from .graph import Graph, UnlearnRequest, apply_request, hop_distances
from .rng import Stream, derive
from .unlearn import margins, prototypes


class MemConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MemConfig:
    alpha: float = 0.5
    beta: float = 0.5
    k_hops: int = 2
    estimator: str = "exact_loo"
    num_seeds: int = 5
    num_subsample_models: int = 200
    subsample_keep_frac: float = 0.7
    exclusion_mode: str = "label_only"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise MemConfigError("alpha must lie in [0, 1]")
        if not 0.0 < self.beta <= 1.0:
            raise MemConfigError("beta must lie in (0, 1]")
        if self.k_hops < 1:
            raise MemConfigError("k_hops must be >= 1")
        if self.estimator not in ("exact_loo", "subsample"):
            raise MemConfigError(f"unknown estimator {self.estimator!r}")
        if self.exclusion_mode not in ("label_only", "node_removal"):
            raise MemConfigError(f"unknown exclusion_mode {self.exclusion_mode!r}")
        if not 0.0 < self.subsample_keep_frac <= 1.0:
            raise MemConfigError("subsample_keep_frac must lie in (0, 1]")


@dataclass
class MemTable:
    """Memorization decomposition for every training node.

    Arrays are aligned with ``node_ids``; ``nan`` marks an undefined score
    (subsample estimator with an empty partition).
    """

    node_ids: np.ndarray
    delta_self: np.ndarray
    delta_nbr: np.ndarray
    mem: np.ndarray
    alpha: float
    meta: dict = field(default_factory=dict)

    def scores(self, num_nodes: int) -> np.ndarray:
        """Full-length per-node array of ``mem``; ``nan`` off the table."""
        out = np.full(num_nodes, np.nan)
        out[self.node_ids] = self.mem
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node_id", "delta_self", "delta_nbr", "mem"])
        for row in zip(self.node_ids, self.delta_self, self.delta_nbr, self.mem):
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()

    def metadata_json(self) -> str:
        return json.dumps({"alpha": self.alpha, **self.meta}, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, text: str, meta_json: str | None = None) -> "MemTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        meta = json.loads(meta_json) if meta_json else {}
        alpha = float(meta.pop("alpha", 0.5))
        return cls(
            node_ids=np.array([int(r["node_id"]) for r in rows], dtype=np.int64),
            delta_self=np.array([float(r["delta_self"]) for r in rows]),
            delta_nbr=np.array([float(r["delta_nbr"]) for r in rows]),
            mem=np.array([float(r["mem"]) for r in rows]),
            alpha=alpha,
            meta=meta,
        )


def neighbor_weights(
    graph: Graph,
    v: int,
    k: int,
    beta: float,
    among: np.ndarray | None = None,
    dist: np.ndarray | None = None,
) -> dict[int, float]:
    """Distance-decayed weights over nodes 1..k hops from ``v``.

    ``among`` (boolean mask) restricts the candidate set before
    normalization. ``dist`` may pass precomputed hop distances from ``v``.
    """
    if dist is None:
        dist = hop_distances(graph, [v])
    ok = (dist >= 1) & (dist <= k)
    if among is not None:
        ok &= among
    nodes = np.flatnonzero(ok)
    if len(nodes) == 0:
        return {}
    raw = beta ** dist[nodes]
    w = raw / raw.sum()
    return {int(j): float(x) for j, x in zip(nodes, w)}


def _correct(params: ModelParams, prop: Propagation, labels: np.ndarray) -> np.ndarray:
    return forward(params, prop).predictions() == labels


def _seed_list(train_cfg: TrainConfig, count: int, tag: str) -> list[int]:
    return [derive(train_cfg.seed, tag, i) for i in range(count)]


def _cfg_with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(cfg.hidden_dim, cfg.epochs, cfg.learning_rate, cfg.weight_decay, seed, cfg.optimizer)


# per-process state for the leave-one-out fan-out
_WORKER: dict = {}


def _init_worker(graph, train_cfg, seeds, mode):
    _WORKER.update(graph=graph, train_cfg=train_cfg, seeds=seeds, mode=mode, prop=Propagation(graph))


def _loo_correct(v: int) -> np.ndarray:
    """Correctness (K x n) of the K models trained without node ``v``."""
    g, cfg, seeds, mode = _WORKER["graph"], _WORKER["train_cfg"], _WORKER["seeds"], _WORKER["mode"]
    prop = _WORKER["prop"]
    out = np.zeros((len(seeds), g.num_nodes), bool)
    if mode == "label_only":
        nodes = g.train_nodes[g.train_nodes != v]
        for i, s in enumerate(seeds):
            p = train(g, _cfg_with_seed(cfg, s), train_nodes=nodes, prop=prop)
            out[i] = _correct(p, prop, g.labels)
    else:
        rem = apply_request(g, UnlearnRequest.nodes([v]))
        prop_rem = Propagation(rem)
        for i, s in enumerate(seeds):
            p = train(rem, _cfg_with_seed(cfg, s), prop=prop_rem)
            c = _correct(p, prop_rem, g.labels)
            # v itself is judged with its edges re-inserted
            c[v] = _correct(p, prop, g.labels)[v]
            out[i] = c
    return out


def _map(fn, items, workers, initargs):
    if workers <= 1:
        _init_worker(*initargs)
        try:
            return [fn(x) for x in items]
        finally:
            _WORKER.clear()
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=initargs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _assemble(graph, cfg, pr_with_fn, pr_without_fn, meta) -> MemTable:
    nodes = graph.train_nodes
    train_mask = graph.train_mask
    dists = hop_distances_many(graph, nodes)
    d_self = np.zeros(len(nodes))
    d_nbr = np.zeros(len(nodes))
    for idx, v in enumerate(nodes):
        pw, pwo = pr_with_fn(idx, v), pr_without_fn(idx, v)
        if pw is None or pwo is None:
            d_self[idx] = d_nbr[idx] = np.nan
            continue
        d_self[idx] = abs(pw[v] - pwo[v])
        among = train_mask.copy()
        among[v] = False
        w = neighbor_weights(graph, int(v), cfg.k_hops, cfg.beta, among=among, dist=dists[idx])
        d_nbr[idx] = sum(wj * abs(pw[j] - pwo[j]) for j, wj in w.items())
    mem = cfg.alpha * d_self + (1.0 - cfg.alpha) * d_nbr
    return MemTable(nodes.copy(), d_self, d_nbr, mem, cfg.alpha, meta)


def hop_distances_many(graph: Graph, sources: np.ndarray) -> np.ndarray:
    """Row ``i`` holds hop distances from ``sources[i]`` (``inf`` if unreachable)."""
    if len(sources) == 0:
        return np.zeros((0, graph.num_nodes))
    return np.atleast_2d(
        csgraph.shortest_path(graph.adjacency(), directed=False, unweighted=True, indices=np.asarray(sources))
    )


def estimate_mem_exact(graph: Graph, cfg: MemConfig, train_cfg: TrainConfig, workers: int = 1) -> MemTable:
    """Leave-one-out memorization with ``K`` seeds per training set.

    The ``K`` models on the full training set are shared by every node;
    each node then costs ``K`` more trainings without it.
    """
    if cfg.num_seeds < 1:
        raise MemConfigError("num_seeds must be >= 1 for exact leave-one-out")
    seeds = _seed_list(train_cfg, cfg.num_seeds, "mem")
    prop = Propagation(graph)
    with_correct = np.stack(
        [_correct(train(graph, _cfg_with_seed(train_cfg, s), prop=prop), prop, graph.labels) for s in seeds]
    )
    pr_with = with_correct.mean(axis=0)
    nodes = [int(v) for v in graph.train_nodes]
    without = _map(_loo_correct, nodes, workers, (graph, train_cfg, seeds, cfg.exclusion_mode))
    meta = {
        "estimator": "exact_loo",
        "num_seeds": cfg.num_seeds,
        "seeds": [str(s) for s in seeds],
        "exclusion_mode": cfg.exclusion_mode,
        "beta": cfg.beta,
        "k_hops": cfg.k_hops,
        "trainings": (len(nodes) + 1) * len(seeds),
    }
    return _assemble(graph, cfg, lambda i, v: pr_with, lambda i, v: without[i].mean(axis=0), meta)


def _subsample_member(graph, keep, seed):
    train_nodes = graph.train_nodes
    k = int(round(keep * len(train_nodes)))
    return np.sort(Stream(seed, "subsample").choice(train_nodes, k))


def _subsample_correct(args) -> np.ndarray:
    seed, keep = args
    g, cfg, prop = _WORKER["graph"], _WORKER["train_cfg"], _WORKER["prop"]
    nodes = _subsample_member(g, keep, seed)
    p = train(g, _cfg_with_seed(cfg, seed), train_nodes=nodes, prop=prop)
    return _correct(p, prop, g.labels)


def estimate_mem_subsample(graph: Graph, cfg: MemConfig, train_cfg: TrainConfig, workers: int = 1) -> MemTable:
    """Monte-Carlo memorization from ``M`` models on random training subsets.

    For node ``v`` the models are split by whether their subset contained
    ``v``; a node whose split leaves one side empty gets ``nan`` scores.
    """
    m = cfg.num_subsample_models
    if m < 10:
        raise MemConfigError("num_subsample_models must be >= 10")
    if cfg.exclusion_mode != "label_only":
        raise MemConfigError("subsample estimator supports exclusion_mode='label_only' only")
    seeds = _seed_list(train_cfg, m, "subsample")
    n = graph.num_nodes
    member = np.zeros((m, n), bool)
    for i, s in enumerate(seeds):
        member[i, _subsample_member(graph, cfg.subsample_keep_frac, s)] = True
    correct = np.stack(
        _map(_subsample_correct, [(s, cfg.subsample_keep_frac) for s in seeds], workers, (graph, train_cfg, seeds, "label_only"))
    ).astype(np.float64)

    def side(v, inside):
        rows = member[:, v] == inside
        return correct[rows].mean(axis=0) if rows.any() else None

    meta = {
        "estimator": "subsample",
        "num_subsample_models": m,
        "subsample_keep_frac": cfg.subsample_keep_frac,
        "seeds": [str(s) for s in seeds],
        "exclusion_mode": "label_only",
        "beta": cfg.beta,
        "k_hops": cfg.k_hops,
        "trainings": m,
    }
    table = _assemble(graph, cfg, lambda i, v: side(v, True), lambda i, v: side(v, False), meta)
    if len(table.mem) and np.all(np.isnan(table.mem)):
        raise MemConfigError(
            "every node has an empty with/without partition "
            f"(subsample_keep_frac={cfg.subsample_keep_frac}); use estimator='exact_loo'"
        )
    return table


def estimate_mem(graph: Graph, cfg: MemConfig, train_cfg: TrainConfig, workers: int = 1) -> MemTable:
    if cfg.estimator == "exact_loo":
        return estimate_mem_exact(graph, cfg, train_cfg, workers)
    return estimate_mem_subsample(graph, cfg, train_cfg, workers)


# difficulty ------------------------------------------------------------------------


def node_difficulty(table: MemTable, num_nodes: int | None = None) -> np.ndarray:
    """Node difficulty is the memorization score itself."""
    n = num_nodes if num_nodes is not None else int(table.node_ids.max()) + 1 if len(table.node_ids) else 0
    return table.scores(n)


def edge_difficulty(
    graph: Graph,
    node_scores: np.ndarray,
    edges: np.ndarray | None = None,
    missing: str = "zero",
) -> tuple[np.ndarray, np.ndarray]:
    """Per-edge difficulty ``s(u)/sqrt(deg u) + s(v)/sqrt(deg v)``.

    Degrees come from ``graph`` (no self-loops). Endpoints without a score
    contribute 0 (``missing="zero"``) or make the edge ``nan``
    (``missing="skip"``). Returns ``(edges, scores)``.
    """
    if missing not in ("zero", "skip"):
        raise ValueError(f"unknown missing policy {missing!r}")
    e = graph.edge_list() if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    s = np.asarray(node_scores, dtype=np.float64)
    deg = graph.degrees.astype(np.float64)
    su, sv = s[e[:, 0]], s[e[:, 1]]
    if missing == "zero":
        su, sv = np.nan_to_num(su, nan=0.0), np.nan_to_num(sv, nan=0.0)
    return e, su / np.sqrt(deg[e[:, 0]]) + sv / np.sqrt(deg[e[:, 1]])


def feature_difficulty(graph: Graph, node_scores: np.ndarray, owner_sets: dict) -> dict:
    """Mean node difficulty over each feature's training-node owners."""
    out = {}
    for feat, owners in owner_sets.items():
        own = np.unique(np.asarray(list(owners), dtype=np.int64))
        own = own[graph.train_mask[own]] if len(own) else own
        if len(own) == 0:
            raise ValueError(f"feature {feat!r} has no training-node owners; difficulty undefined")
        out[feat] = float(np.mean(np.asarray(node_scores)[own]))
    return out


def row_feature_difficulty(graph: Graph, node_scores: np.ndarray) -> np.ndarray:
    """Difficulty of deleting each training node's own feature row."""
    scores = feature_difficulty(graph, node_scores, {int(v): [int(v)] for v in graph.train_nodes})
    out = np.full(graph.num_nodes, np.nan)
    for v, s in scores.items():
        out[v] = s
    return out


@dataclass
class ProxyScores:
    scores: np.ndarray  # per node, nan off the training set
    orientation: str


def margin_proxy_difficulty(params_o: ModelParams, graph: Graph, orientation: str = "as_written") -> ProxyScores:
    """Training-free difficulty: each training node's prototype margin.

    Computed from the original model on the full graph. ``negated`` flips
    the sign so larger means harder when margins anti-correlate with mem.
    """
    if orientation not in ("as_written", "negated"):
        raise ValueError(f"unknown orientation {orientation!r}")
    probs = forward(params_o, graph).probs
    nodes = graph.train_nodes
    protos = prototypes(probs, graph.labels, nodes, graph.num_classes)
    gamma = margins(probs[nodes], graph.labels[nodes], protos)
    out = np.full(graph.num_nodes, np.nan)
    out[nodes] = gamma if orientation == "as_written" else -gamma
    return ProxyScores(out, orientation)


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    ok = ~(np.isnan(a) | np.isnan(b))
    if ok.sum() < 3:
        return math.nan
    return float(stats.spearmanr(a[ok], b[ok]).statistic)


def config_dict(cfg: MemConfig) -> dict:
    return asdict(cfg)
