"""Node-classification graphs: construction, ingestion, surgery and metrics."""

from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .rng import Stream

log = logging.getLogger(__name__)

GRAPH_FORMAT = "mgu-graph"
GRAPH_VERSION = 1
UNLABELED = -1


class GraphError(ValueError):
    """Invalid graph, request or ingestion input."""


class ParseError(GraphError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = str(path)
        self.line_no = line_no


class SchemaError(GraphError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected graph with node features, labels and split masks.

    Adjacency is CSR (``indptr``, ``indices``) with both directions of every
    edge stored, neighbor lists sorted, no self-loops and no duplicates.
    Unlabeled nodes carry label ``-1``.
    """

    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int
    node_names: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("indptr", "indices", "features", "labels", "train_mask", "test_mask"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def train_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask)

    @property
    def test_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.test_mask)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < len(nb) and nb[i] == v)

    def edge_list(self) -> np.ndarray:
        """Each undirected edge once as ``(u, v)`` with ``u < v``, sorted."""
        src = np.repeat(np.arange(self.num_nodes), self.degrees)
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices))
        return sp.csr_matrix(
            (data, self.indices.copy(), self.indptr.copy()),
            shape=(self.num_nodes, self.num_nodes),
        )

    def validate(self) -> "Graph":
        n = self.num_nodes
        if self.features.shape[0] != n:
            raise SchemaError(f"features have {self.features.shape[0]} rows, expected {n}")
        if len(self.labels) != n or len(self.train_mask) != n or len(self.test_mask) != n:
            raise SchemaError("labels/masks length does not match num_nodes")
        src = np.repeat(np.arange(n), self.degrees)
        if np.any(src == self.indices):
            raise GraphError("self-loop stored")
        same_row = src[1:] == src[:-1]
        bad = np.flatnonzero(same_row & (np.diff(self.indices) <= 0))
        if len(bad):
            raise GraphError(f"neighbor list of node {int(src[bad[0]])} not strictly sorted")
        a = self.adjacency()
        if (a != a.T).nnz:
            raise GraphError("adjacency is not symmetric")
        if np.any(self.train_mask & self.test_mask):
            raise GraphError("train and test masks overlap")
        if np.any(self.labels[self.train_mask] == UNLABELED):
            raise GraphError("train-masked node without a label")
        if np.any(self.labels >= self.num_classes):
            raise GraphError("label out of range")
        return self

    def with_masks(self, train_mask: np.ndarray, test_mask: np.ndarray) -> "Graph":
        return replace(
            self,
            train_mask=np.asarray(train_mask, dtype=bool).copy(),
            test_mask=np.asarray(test_mask, dtype=bool).copy(),
        ).validate()

    def with_features(self, features: np.ndarray) -> "Graph":
        return replace(self, features=np.asarray(features, dtype=np.float64).copy())

    def without_edges(self) -> "Graph":
        """Same nodes, features, labels and masks with every edge dropped."""
        n = self.num_nodes
        return replace(self, indptr=np.zeros(n + 1, dtype=np.int64), indices=np.zeros(0, dtype=np.int64))

    # serialization ---------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "n": self.num_nodes,
            "d": self.feat_dim,
            "C": self.num_classes,
            "csr_offsets": self.indptr.tolist(),
            "csr_targets": self.indices.tolist(),
            "features": self.features.tolist(),
            "labels": [None if y == UNLABELED else int(y) for y in self.labels],
            "train_mask": self.train_mask.tolist(),
            "test_mask": self.test_mask.tolist(),
        }
        if self.node_names is not None:
            doc["node_names"] = list(self.node_names)
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Graph":
        doc = json.loads(text)
        if doc.get("format") != GRAPH_FORMAT or doc.get("version") != GRAPH_VERSION:
            raise SchemaError(f"unsupported graph document {doc.get('format')!r} v{doc.get('version')!r}")
        n, d = doc["n"], doc["d"]
        feats = np.array(doc["features"], dtype=np.float64).reshape(n, d)
        names = doc.get("node_names")
        return cls(
            indptr=np.array(doc["csr_offsets"], dtype=np.int64),
            indices=np.array(doc["csr_targets"], dtype=np.int64),
            features=feats,
            labels=np.array([UNLABELED if y is None else y for y in doc["labels"]], dtype=np.int64),
            train_mask=np.array(doc["train_mask"], dtype=bool),
            test_mask=np.array(doc["test_mask"], dtype=bool),
            num_classes=int(doc["C"]),
            node_names=tuple(names) if names is not None else None,
        ).validate()


def build_graph(
    num_nodes: int,
    edges: Iterable[tuple[int, int]] | np.ndarray,
    features: np.ndarray,
    labels: Sequence[int] | np.ndarray | None = None,
    train_mask: np.ndarray | None = None,
    test_mask: np.ndarray | None = None,
    num_classes: int | None = None,
    node_names: Sequence[str] | None = None,
    meta: dict | None = None,
) -> Graph:
    """Build a validated graph from an arbitrary edge list.

    Edges are symmetrized; self-loops and duplicates are dropped silently.
    """
    n = int(num_nodes)
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    e = e.reshape(-1, 2)
    if len(e) and (e.min() < 0 or e.max() >= n):
        raise GraphError("edge endpoint out of range")
    e = e[e[:, 0] != e[:, 1]]
    both = np.concatenate([e, e[:, ::-1]]) if len(e) else e
    if len(both):
        keys = np.unique(both[:, 0] * n + both[:, 1])
        src, dst = keys // n, keys % n
    else:
        src = dst = np.zeros(0, dtype=np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    labels_arr = (
        np.full(n, UNLABELED, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64).copy()
    )
    if num_classes is None:
        num_classes = int(labels_arr.max()) + 1 if np.any(labels_arr >= 0) else 0
    feats = np.asarray(features, dtype=np.float64).copy()
    if feats.ndim != 2:
        raise SchemaError("features must be a 2-D matrix")
    return Graph(
        indptr=indptr,
        indices=dst.astype(np.int64),
        features=feats,
        labels=labels_arr,
        train_mask=np.zeros(n, bool) if train_mask is None else np.asarray(train_mask, bool).copy(),
        test_mask=np.zeros(n, bool) if test_mask is None else np.asarray(test_mask, bool).copy(),
        num_classes=int(num_classes),
        node_names=tuple(node_names) if node_names is not None else None,
        meta=dict(meta or {}),
    ).validate()


# ingestion -----------------------------------------------------------------


def _finish_load(ids, feats, raw_labels, edges_raw, edges_path, meta_extra=None):
    index = {name: i for i, name in enumerate(ids)}
    classes: dict[str, int] = {}
    labels = []
    for lab in raw_labels:
        if lab is None or lab == "":
            labels.append(UNLABELED)
        else:
            labels.append(classes.setdefault(lab, len(classes)))
    edges, dropped = [], 0
    for a, b in edges_raw:
        if a in index and b in index:
            edges.append((index[a], index[b]))
        else:
            dropped += 1
    if dropped:
        log.warning("%s: dropped %d edge rows with unknown endpoints", edges_path, dropped)
    meta = {"dropped_edges": dropped, "classes": list(classes)}
    meta.update(meta_extra or {})
    d = len(feats[0]) if feats else 0
    return build_graph(
        len(ids),
        edges,
        np.array(feats, dtype=np.float64).reshape(len(ids), d),
        labels,
        num_classes=len(classes),
        node_names=ids,
        meta=meta,
    )


def _float_row(tokens, path, line_no):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(path, line_no, f"non-numeric feature value ({exc})") from None


def load_linqs(content_path: str | Path, cites_path: str | Path) -> Graph:
    """Load a LINQS-style ``.content`` / ``.cites`` pair (Cora, Citeseer).

    Content rows are ``id<TAB>f_1 .. f_d<TAB>label``; cites rows are
    ``cited<TAB>citing``. Labels map to class ids in first-appearance order.
    The number of citations dropped for unknown endpoints is logged and
    kept in ``graph.meta["dropped_edges"]``.
    """
    ids, feats, labels = [], [], []
    seen = set()
    d = None
    with open(content_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            tok = line.split("\t") if "\t" in line else line.split()
            if len(tok) < 3:
                raise ParseError(content_path, line_no, f"expected id, features and label, got {len(tok)} fields")
            row = _float_row(tok[1:-1], content_path, line_no)
            if d is None:
                d = len(row)
            elif len(row) != d:
                raise SchemaError(f"{content_path}:{line_no}: feature arity {len(row)} != {d}")
            if tok[0] in seen:
                raise ParseError(content_path, line_no, f"duplicate node id {tok[0]!r}")
            seen.add(tok[0])
            ids.append(tok[0])
            feats.append(row)
            labels.append(tok[-1])
    edges = []
    with open(cites_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            tok = line.split()
            if len(tok) != 2:
                raise ParseError(cites_path, line_no, f"expected 2 fields, got {len(tok)}")
            edges.append((tok[0], tok[1]))
    return _finish_load(ids, feats, labels, edges, cites_path)


def load_csv(nodes_path: str | Path, edges_path: str | Path) -> Graph:
    """Load ``id,label,f0..f{d-1}`` node rows and ``src,dst`` edge rows.

    An empty label leaves the node unlabeled.
    """
    ids, feats, labels = [], [], []
    with open(nodes_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["id", "label"]:
            raise SchemaError(f"{nodes_path}: header must start with 'id,label'")
        d = len(header) - 2
        expected = [f"f{i}" for i in range(d)]
        if header[2:] != expected:
            raise SchemaError(f"{nodes_path}: feature columns must be f0..f{d - 1}")
        for line_no, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != d + 2:
                raise SchemaError(f"{nodes_path}:{line_no}: {len(row) - 2} features, expected {d}")
            ids.append(row[0])
            labels.append(row[1])
            feats.append(_float_row(row[2:], nodes_path, line_no))
    edges = []
    with open(edges_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["src", "dst"]:
            raise SchemaError(f"{edges_path}: header must be 'src,dst'")
        for line_no, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(edges_path, line_no, f"expected 2 fields, got {len(row)}")
            edges.append((row[0], row[1]))
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{nodes_path}: duplicate node ids")
    return _finish_load(ids, feats, labels, edges, edges_path)


def split(graph: Graph, train_frac: float, seed: int) -> Graph:
    """Seeded uniform train/test split; ``round(train_frac * n)`` train nodes."""
    if not 0.0 < train_frac < 1.0:
        raise GraphError(f"train_frac must lie in (0, 1), got {train_frac}")
    unlabeled = np.flatnonzero(graph.labels == UNLABELED)
    if len(unlabeled):
        raise GraphError(f"cannot split: node {int(unlabeled[0])} is unlabeled")
    n = graph.num_nodes
    n_train = int(round(train_frac * n))
    order = Stream(seed, "split").permutation(n)
    train = np.zeros(n, bool)
    train[order[:n_train]] = True
    return graph.with_masks(train, ~train)


# synthetic graphs ------------------------------------------------------------


@dataclass(frozen=True)
class SbmSpec:
    blocks: tuple[int, ...]
    p_in: float
    p_out: float
    feat_dim: int = 16
    mean_shift: float = 1.0
    noise_std: float = 1.0
    label_noise: float = 0.0
    seed: int = 0
    train_frac: float = 0.8

    def validate(self) -> "SbmSpec":
        if not self.blocks or any(b < 1 for b in self.blocks):
            raise GraphError("block sizes must be >= 1")
        for name in ("p_in", "p_out"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise GraphError(f"{name}={p} outside [0, 1]")
        if not 0.0 <= self.label_noise < 1.0:
            raise GraphError("label_noise must lie in [0, 1)")
        if self.feat_dim < 1:
            raise GraphError("feat_dim must be >= 1")
        return self


def gen_sbm(spec: SbmSpec) -> Graph:
    """Sample a stochastic block model graph with Gaussian block features.

    Node labels are block ids. The graph comes pre-split
    (``spec.train_frac``), and ``label_noise`` of the train nodes then get a
    label drawn uniformly from all classes. Block ``b``'s feature mean is
    ``mean_shift`` along axis ``b mod feat_dim``.
    """
    spec.validate()
    blocks = np.repeat(np.arange(len(spec.blocks)), spec.blocks)
    n = len(blocks)
    iu, ju = np.triu_indices(n, k=1)
    u = Stream(spec.seed, "sbm", "edges").uniform(len(iu))
    p = np.where(blocks[iu] == blocks[ju], spec.p_in, spec.p_out)
    keep = u < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    means = np.zeros((len(spec.blocks), spec.feat_dim))
    means[np.arange(len(spec.blocks)), np.arange(len(spec.blocks)) % spec.feat_dim] = spec.mean_shift
    noise = Stream(spec.seed, "sbm", "features").normal(n * spec.feat_dim).reshape(n, spec.feat_dim)
    feats = means[blocks] + spec.noise_std * noise

    n_train = int(round(spec.train_frac * n))
    order = Stream(spec.seed, "sbm", "split").permutation(n)
    train = np.zeros(n, bool)
    train[order[:n_train]] = True
    labels = blocks.copy()
    n_noisy = int(round(spec.label_noise * n_train))
    if n_noisy:
        s = Stream(spec.seed, "sbm", "label_noise")
        noisy = np.sort(s.choice(np.flatnonzero(train), n_noisy))
        labels[noisy] = s.integers(len(spec.blocks), n_noisy)
    return build_graph(
        n,
        edges,
        feats,
        labels,
        train_mask=train,
        test_mask=~train,
        num_classes=len(spec.blocks),
        meta={"blocks": blocks.tolist()},
    )


# deletion requests -----------------------------------------------------------


class RequestKind(str, enum.Enum):
    NODE = "node"
    EDGE = "edge"
    FEATURE = "feature"


@dataclass(frozen=True)
class UnlearnRequest:
    """A deletion set: nodes, edges (unordered pairs) or feature-owner nodes."""

    kind: RequestKind
    node_ids: tuple[int, ...] = ()
    edge_pairs: tuple[tuple[int, int], ...] = ()

    @classmethod
    def nodes(cls, ids) -> "UnlearnRequest":
        return cls(RequestKind.NODE, node_ids=tuple(sorted({int(i) for i in ids})))

    @classmethod
    def features(cls, ids) -> "UnlearnRequest":
        return cls(RequestKind.FEATURE, node_ids=tuple(sorted({int(i) for i in ids})))

    @classmethod
    def edges(cls, pairs) -> "UnlearnRequest":
        norm = {(min(int(u), int(v)), max(int(u), int(v))) for u, v in pairs}
        return cls(RequestKind.EDGE, edge_pairs=tuple(sorted(norm)))

    @property
    def is_empty(self) -> bool:
        return not self.node_ids and not self.edge_pairs

    def touched_nodes(self) -> np.ndarray:
        """Nodes the request is about: targets, or endpoints of deleted edges."""
        if self.kind is RequestKind.EDGE:
            return np.unique(np.array(self.edge_pairs, dtype=np.int64).reshape(-1))
        return np.array(self.node_ids, dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "node_ids": list(self.node_ids),
            "edge_pairs": [list(p) for p in self.edge_pairs],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "UnlearnRequest":
        kind = RequestKind(doc["kind"])
        if kind is RequestKind.EDGE:
            return cls.edges(doc.get("edge_pairs", []))
        if kind is RequestKind.NODE:
            return cls.nodes(doc.get("node_ids", []))
        return cls.features(doc.get("node_ids", []))


def _is_removed_node(graph: Graph, v: int) -> bool:
    return graph.labels[v] == UNLABELED and graph.degrees[v] == 0 and not graph.test_mask[v]


def validate_request(graph: Graph, req: UnlearnRequest) -> None:
    n = graph.num_nodes
    for v in req.node_ids:
        if not 0 <= v < n:
            raise GraphError(f"request node {v} out of range")
        if graph.train_mask[v]:
            continue
        # re-deleting an already removed node is a no-op, not an error
        if req.kind is RequestKind.NODE and _is_removed_node(graph, v):
            continue
        raise GraphError(f"request node {v} is not a training node")
    for u, v in req.edge_pairs:
        if not (0 <= u < n and 0 <= v < n) or not graph.has_edge(u, v):
            raise GraphError(f"request edge ({u}, {v}) not in graph")


def apply_request(graph: Graph, req: UnlearnRequest) -> Graph:
    """Return the remaining graph after deleting ``req``.

    Node ids are stable: deleted nodes stay as unlabeled, untrained isolates
    with their feature rows intact.
    """
    validate_request(graph, req)
    if req.kind is RequestKind.FEATURE:
        feats = graph.features.copy()
        feats[list(req.node_ids)] = 0.0
        return graph.with_features(feats)
    edges = graph.edge_list()
    labels, train = graph.labels.copy(), graph.train_mask.copy()
    if req.kind is RequestKind.NODE:
        ids = np.array(req.node_ids, dtype=np.int64)
        gone = np.zeros(graph.num_nodes, bool)
        gone[ids] = True
        edges = edges[~(gone[edges[:, 0]] | gone[edges[:, 1]])]
        labels[ids] = UNLABELED
        train[ids] = False
    else:
        n = graph.num_nodes
        drop = {u * n + v for u, v in req.edge_pairs}
        keys = edges[:, 0] * n + edges[:, 1]
        edges = edges[~np.isin(keys, np.fromiter(drop, dtype=np.int64, count=len(drop)))]
    return build_graph(
        graph.num_nodes,
        edges,
        graph.features,
        labels,
        train_mask=train,
        test_mask=graph.test_mask,
        num_classes=graph.num_classes,
        node_names=graph.node_names,
        meta=graph.meta,
    )


# distances and centrality ----------------------------------------------------


def hop_distances(graph: Graph, sources) -> np.ndarray:
    """Multi-source BFS hop counts; unreachable nodes get ``np.inf``."""
    src = np.unique(np.asarray(list(sources) if not isinstance(sources, np.ndarray) else sources, dtype=np.int64))
    if len(src) == 0:
        return np.full(graph.num_nodes, np.inf)
    return csgraph.dijkstra(graph.adjacency(), directed=False, unweighted=True, indices=src, min_only=True)


def degree_centrality(graph: Graph) -> np.ndarray:
    n = graph.num_nodes
    return graph.degrees / (n - 1) if n > 1 else np.zeros(n)


def pagerank(graph: Graph, damping: float = 0.85, max_iter: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Power-iteration PageRank; dangling mass is spread uniformly."""
    n = graph.num_nodes
    deg = graph.degrees.astype(np.float64)
    src = np.repeat(np.arange(n), graph.degrees)
    pr = np.full(n, 1.0 / n)
    inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
    for _ in range(max_iter):
        contrib = np.zeros(n)
        np.add.at(contrib, graph.indices, (pr * inv)[src])
        dangling = pr[deg == 0].sum()
        new = (1.0 - damping) / n + damping * (contrib + dangling / n)
        err = np.abs(new - pr).sum()
        pr = new
        if err < tol:
            break
    return pr / pr.sum()


def core_numbers(graph: Graph) -> np.ndarray:
    """k-core number of every node by repeated minimum-degree peeling."""
    n = graph.num_nodes
    deg = graph.degrees.astype(np.int64).copy()
    core = np.zeros(n, dtype=np.int64)
    removed = np.zeros(n, bool)
    k = 0
    for _ in range(n):
        live = np.flatnonzero(~removed)
        v = live[np.argmin(deg[live])]
        k = max(k, int(deg[v]))
        core[v] = k
        removed[v] = True
        for u in graph.neighbors(v):
            if not removed[u]:
                deg[u] -= 1
    return core


CENTRALITY_METRICS = ("degree", "pagerank", "kcore")


def centrality(graph: Graph, metric: str) -> np.ndarray:
    if metric == "degree":
        return degree_centrality(graph)
    if metric == "pagerank":
        return pagerank(graph)
    if metric == "kcore":
        return core_numbers(graph).astype(np.float64)
    raise ValueError(f"unknown centrality metric {metric!r}; expected one of {CENTRALITY_METRICS}")

