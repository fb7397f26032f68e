"""Two-layer GCN with hand-written reverse pass, Adam, and JSON model files."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace

import numpy as np
import scipy.sparse as sp

from .graph import UNLABELED, Graph
from .rng import Stream

MODEL_FORMAT = "mgu-gcn"
MODEL_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hidden_dim: int = 64
    epochs: int = 200
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True, eq=False)
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    tau: np.ndarray | None = None

    @property
    def shapes(self) -> tuple[int, int, int]:
        """``(d, h, C)``."""
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def weights(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def without_tau(self) -> "ModelParams":
        return replace(self, tau=None)

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of all arrays (``tau`` included)."""
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or a.tobytes() != b.tobytes()):
                return False
        return True


@dataclass(frozen=True)
class Posteriors:
    probs: np.ndarray
    logits: np.ndarray

    def predictions(self) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest class id
        return np.argmax(self.probs, axis=1)


# propagation ---------------------------------------------------------------


def normalize_adjacency(graph: Graph) -> sp.csr_matrix:
    """Symmetric normalization ``D^-1/2 (A + I) D^-1/2`` as CSR."""
    n = graph.num_nodes
    a = graph.adjacency() + sp.identity(n, format="csr")
    dinv = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
    a_hat = sp.diags(dinv) @ a @ sp.diags(dinv)
    a_hat = sp.csr_matrix(a_hat)
    a_hat.sort_indices()
    return a_hat


class Propagation:
    """Per-graph constants of the forward pass: ``Â`` and ``Â X``.

    ``Â X`` does not depend on the weights, so it is computed once and
    stored sparse when the features are sparse enough to pay off.
    """

    def __init__(self, graph: Graph, features: np.ndarray | None = None):
        self.graph = graph
        self.a_hat = normalize_adjacency(graph)
        x = graph.features if features is None else features
        density = np.count_nonzero(x) / max(x.size, 1)
        if density < 0.1:
            ax = self.a_hat @ sp.csr_matrix(x)
            ax = sp.csr_matrix(ax)
            ax.sort_indices()
            self.ax = ax
            self.ax_t = sp.csr_matrix(ax.T)
        else:
            self.ax = np.asarray(self.a_hat @ x)
            self.ax_t = None

    def ax_t_dot(self, m: np.ndarray) -> np.ndarray:
        if self.ax_t is not None:
            return np.asarray(self.ax_t @ m)
        return self.ax.T @ m


def as_propagation(graph: Graph | Propagation) -> Propagation:
    return graph if isinstance(graph, Propagation) else Propagation(graph)


# forward / backward ----------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


@dataclass
class _Cache:
    pre: np.ndarray  # Â X W1 + b1
    hidden: np.ndarray  # relu(pre)
    agg: np.ndarray  # Â hidden


def _forward(params: ModelParams, prop: Propagation) -> tuple[np.ndarray, _Cache]:
    pre = np.asarray(prop.ax @ params.W1) + params.b1
    hidden = np.maximum(pre, 0.0)
    agg = np.asarray(prop.a_hat @ hidden)
    logits = agg @ params.W2 + params.b2
    return logits, _Cache(pre, hidden, agg)


def forward(params: ModelParams, graph: Graph | Propagation) -> Posteriors:
    """Logits ``Â relu(Â X W1 + b1) W2 + b2`` and their row softmax."""
    logits, _ = _forward(params, as_propagation(graph))
    return Posteriors(softmax(logits), logits)


def _backward(params: ModelParams, prop: Propagation, cache: _Cache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    g = {"W2": cache.agg.T @ d_logits, "b2": d_logits.sum(axis=0)}
    d_agg = d_logits @ params.W2.T
    d_hidden = np.asarray(prop.a_hat @ d_agg)  # Â is symmetric
    d_pre = d_hidden * (cache.pre > 0)
    g["W1"] = prop.ax_t_dot(d_pre)
    g["b1"] = d_pre.sum(axis=0)
    return g


def backward(params: ModelParams, graph: Graph | Propagation, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. ``W1, b1, W2, b2`` given dL/dlogits."""
    prop = as_propagation(graph)
    _, cache = _forward(params, prop)
    return _backward(params, prop, cache, np.asarray(d_logits, dtype=np.float64))


def cross_entropy(logits: np.ndarray, labels: np.ndarray, nodes: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over ``nodes`` and its gradient w.r.t. all logits."""
    lsm = log_softmax(logits[nodes])
    y = labels[nodes]
    loss = -lsm[np.arange(len(nodes)), y].mean()
    d = np.zeros_like(logits)
    probs = np.exp(lsm)
    probs[np.arange(len(nodes)), y] -= 1.0
    d[nodes] = probs / len(nodes)
    return float(loss), d


def weight_decay_penalty(params: ModelParams, wd: float) -> tuple[float, dict[str, np.ndarray]]:
    """``wd * (|W1|^2 + |W2|^2)``; biases are not decayed."""
    val = wd * (float(np.sum(params.W1 * params.W1)) + float(np.sum(params.W2 * params.W2)))
    return val, {"W1": 2.0 * wd * params.W1, "W2": 2.0 * wd * params.W2}


# optimization ----------------------------------------------------------------


class Adam:
    def __init__(self, lr: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m.get(k)
            v = self.v.get(k)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = values[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, values, grads):
        return {k: values[k] - self.lr * g for k, g in grads.items()}


def make_optimizer(name: str, lr: float):
    return Adam(lr) if name == "adam" else SGD(lr)


def glorot_uniform(stream: Stream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * stream.uniform(fan_in * fan_out) - 1.0).reshape(fan_in, fan_out) * limit


def init_params(d: int, h: int, c: int, seed: int) -> ModelParams:
    s = Stream(seed, "glorot")
    return ModelParams(W1=glorot_uniform(s, d, h), b1=np.zeros(h), W2=glorot_uniform(s, h, c), b2=np.zeros(c))


def _add(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + v
    return out


def train(
    graph: Graph,
    cfg: TrainConfig,
    *,
    train_nodes: np.ndarray | None = None,
    prop: Propagation | None = None,
    return_history: bool = False,
):
    """Full-batch training on the train-masked nodes of ``graph``.

    ``train_nodes`` overrides the mask (used by leave-one-out estimation so
    the propagation constants can be shared); ``prop`` must then belong to
    ``graph``. With ``return_history`` the per-epoch losses (before each
    update, plus the final loss) come back alongside the parameters.
    """
    nodes = graph.train_nodes if train_nodes is None else np.asarray(train_nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise ValueError("graph has no training nodes")
    if np.any(graph.labels[nodes] == UNLABELED):
        raise ValueError("training node without label")
    prop = prop or Propagation(graph)
    params = init_params(graph.feat_dim, cfg.hidden_dim, graph.num_classes, cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    values = params.weights()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        params = ModelParams(**values)
        logits, cache = _forward(params, prop)
        loss, d_logits = cross_entropy(logits, graph.labels, nodes)
        pen, d_pen = weight_decay_penalty(params, cfg.weight_decay)
        total = loss + pen
        if not math.isfinite(total):
            raise TrainingDivergedError(epoch, total)
        history.append(total)
        grads = _add(_backward(params, prop, cache, d_logits), d_pen)
        values = opt.step(values, grads)
    params = ModelParams(**values)
    if return_history:
        logits, _ = _forward(params, prop)
        loss, _ = cross_entropy(logits, graph.labels, nodes)
        history.append(loss + weight_decay_penalty(params, cfg.weight_decay)[0])
        return params, history
    return params


def accuracy(
    params: ModelParams,
    graph: Graph,
    node_set,
    eval_graph_override: Graph | Propagation | None = None,
    labels: np.ndarray | None = None,
) -> float:
    """Argmax accuracy over ``node_set``; 1.0 for an empty set.

    Posteriors come from ``eval_graph_override`` when given. Labels default
    to ``graph.labels``.
    """
    nodes = np.asarray(list(node_set) if not isinstance(node_set, np.ndarray) else node_set, dtype=np.int64)
    if len(nodes) == 0:
        return 1.0
    source = graph if eval_graph_override is None else eval_graph_override
    pred = forward(params, source).predictions()
    y = graph.labels if labels is None else labels
    return float(np.mean(pred[nodes] == y[nodes]))


# serialization ---------------------------------------------------------------


def save_model(params: ModelParams) -> bytes:
    d, h, c = params.shapes
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "h": h,
        "d": d,
        "C": c,
        "W1": params.W1.tolist(),
        "b1": params.b1.tolist(),
        "W2": params.W2.tolist(),
        "b2": params.b2.tolist(),
    }
    if params.tau is not None:
        doc["tau"] = params.tau.tolist()
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def load_model(data: bytes | str) -> ModelParams:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model is not valid JSON: {exc}") from None
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model document {doc.get('format')!r} v{doc.get('version')!r}")
    d, h, c = doc["d"], doc["h"], doc["C"]
    params = ModelParams(
        W1=np.array(doc["W1"], dtype=np.float64).reshape(d, h),
        b1=np.array(doc["b1"], dtype=np.float64).reshape(h),
        W2=np.array(doc["W2"], dtype=np.float64).reshape(h, c),
        b2=np.array(doc["b2"], dtype=np.float64).reshape(c),
        tau=np.array(doc["tau"], dtype=np.float64) if "tau" in doc else None,
    )
    for name, arr in params.weights().items():
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"non-finite entries in {name}")
    return params
