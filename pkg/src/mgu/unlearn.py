"""Adaptive unlearning: prototype margins, margin forgetting, adaptive distillation.

The student starts at the original weights and is optimized on the
remaining graph with

    L = lam * L_margin + L_distill

where ``L_margin`` pushes the deleted nodes' prototype margins below their
targets ``tau`` and ``L_distill`` keeps the remaining training nodes close
to the frozen teacher at a per-node temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .gcn import (
    Adam,
    ModelParams,
    Propagation,
    TrainConfig,
    _backward,
    _forward,
    softmax,
    train,
)
from .graph import Graph, RequestKind, UnlearnRequest, apply_request

KL_FLOOR = 1e-12


class UnlearnError(RuntimeError):
    pass


@dataclass(frozen=True)
class UnlearnConfig:
    lam: float = 0.55
    t_max: float = 8.0
    epochs: int = 20
    learning_rate: float = 0.01
    tau_mode: str = "learnable"
    tau_anchor_mu: float = 1.0
    temperature_mode: str = "equation"
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.t_max > 1:
            raise ValueError("t_max must be > 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.tau_mode not in ("frozen", "learnable"):
            raise ValueError(f"unknown tau_mode {self.tau_mode!r}")
        if self.tau_anchor_mu < 0:
            raise ValueError("tau_anchor_mu must be >= 0")
        if self.temperature_mode not in ("equation", "literal_prose"):
            raise ValueError(f"unknown temperature_mode {self.temperature_mode!r}")


# primitives ------------------------------------------------------------------


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(p || q)`` with the additive floor inside both logs."""
    return np.sum(p * (np.log(p + KL_FLOOR) - np.log(q + KL_FLOOR)), axis=-1)


def prototypes(probs: np.ndarray, labels: np.ndarray, nodes: np.ndarray, num_classes: int) -> np.ndarray:
    """Class prototypes: mean posterior of the given training nodes per class."""
    nodes = np.asarray(nodes, dtype=np.int64)
    protos = np.zeros((num_classes, probs.shape[1]))
    for c in range(num_classes):
        members = nodes[labels[nodes] == c]
        if len(members) == 0:
            raise UnlearnError(f"class {c} has no training nodes; prototype undefined")
        protos[c] = probs[members].mean(axis=0)
    return protos


def _margin_coeffs(ys: np.ndarray, num_classes: int) -> np.ndarray:
    a = np.full((len(ys), num_classes), 1.0 / (num_classes - 1))
    a[np.arange(len(ys)), ys] = -1.0
    return a


def margins(h: np.ndarray, ys: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """Prototype margin of each row of ``h`` w.r.t. its class ``ys``.

    Mean KL to the other classes' prototypes minus KL to the own class.
    """
    h = np.atleast_2d(h)
    c = protos.shape[0]
    if c < 2:
        raise UnlearnError("margin needs at least two classes")
    kl = np.stack([kl_rows(h, protos[k][None, :]) for k in range(c)], axis=1)
    return np.sum(_margin_coeffs(np.asarray(ys), c) * kl, axis=1)


def margin(h: np.ndarray, y: int, protos: np.ndarray) -> float:
    return float(margins(np.asarray(h)[None, :], np.array([y]), protos)[0])


def softplus(x):
    return np.logaddexp(0.0, x)


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Pull dL/dprobs back through a row softmax to dL/dlogits."""
    return probs * (d_probs - np.sum(d_probs * probs, axis=1, keepdims=True))


def temperatures(
    teacher_full: np.ndarray,
    teacher_remaining: np.ndarray,
    t_max: float,
    mode: str = "equation",
) -> np.ndarray:
    """Per-node distillation temperatures from the teacher's posterior shift.

    ``equation``: ``1 + (t_max - 1) * sigmoid(KL(remaining || full))``.
    ``literal_prose``: ``1 + (t_max - 1) * (2 * sigmoid(KL) - 1)`` so that
    unaffected nodes get exactly 1.
    """
    kl = kl_rows(teacher_remaining, teacher_full)
    s = expit(kl)
    if mode == "literal_prose":
        s = 2.0 * s - 1.0
    return 1.0 + (t_max - 1.0) * s


# losses ------------------------------------------------------------------------


@dataclass
class UnlearnContext:
    """Everything about a request that stays fixed while the student moves."""

    original_params: ModelParams
    graph_full: Graph
    graph_remaining: Graph
    request: UnlearnRequest
    prop_remaining: Propagation
    labels: np.ndarray  # original labels, deleted nodes included
    proto_nodes: np.ndarray  # remaining training nodes
    targets: np.ndarray  # nodes whose margin is pushed down
    prototypes: np.ndarray  # teacher prototypes on the remaining graph
    temperatures: np.ndarray  # per node, indexed by node id
    teacher_logits: np.ndarray  # on the remaining graph
    tau_init: np.ndarray  # per target
    meta: dict = field(default_factory=dict)


def margin_targets(graph_full: Graph, request: UnlearnRequest) -> np.ndarray:
    """Deleted nodes, or training nodes touching deleted edges / features."""
    touched = request.touched_nodes()
    if request.kind is RequestKind.NODE:
        return touched
    return touched[graph_full.train_mask[touched]] if len(touched) else touched


def build_context(params_o: ModelParams, graph_full: Graph, request: UnlearnRequest, cfg: UnlearnConfig) -> UnlearnContext:
    graph_rem = apply_request(graph_full, request)
    prop_full = Propagation(graph_full)
    prop_rem = Propagation(graph_rem)
    logits_full, _ = _forward(params_o, prop_full)
    logits_rem, _ = _forward(params_o, prop_rem)
    probs_full, probs_rem = softmax(logits_full), softmax(logits_rem)
    labels = graph_full.labels
    proto_nodes = graph_rem.train_nodes
    protos = prototypes(probs_rem, labels, proto_nodes, graph_full.num_classes)
    targets = margin_targets(graph_full, request)
    tau0 = margins(probs_rem[targets], labels[targets], protos) if len(targets) else np.zeros(0)
    temps = temperatures(probs_full, probs_rem, cfg.t_max, cfg.temperature_mode)
    return UnlearnContext(
        original_params=params_o,
        graph_full=graph_full,
        graph_remaining=graph_rem,
        request=request,
        prop_remaining=prop_rem,
        labels=labels,
        proto_nodes=proto_nodes,
        targets=targets,
        prototypes=protos,
        temperatures=temps,
        teacher_logits=logits_rem,
        tau_init=tau0,
    )


def margin_loss(
    probs: np.ndarray,
    ctx: UnlearnContext,
    tau: np.ndarray,
    mu: float = 0.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Softplus margin loss on the student's posteriors.

    Prototypes are recomputed from ``probs`` over the remaining training
    nodes, so gradients reach those nodes too. ``mu`` adds the anchor
    ``mu * mean((tau - tau_init)^2)``.

    Returns ``(loss, dL/dprobs, dL/dtau)``.
    """
    targets = ctx.targets
    d_probs = np.zeros_like(probs)
    if len(targets) == 0:
        return 0.0, d_probs, np.zeros(0)
    num_classes = probs.shape[1]
    labels = ctx.labels
    protos = prototypes(probs, labels, ctx.proto_nodes, num_classes)
    h = probs[targets]
    ys = labels[targets]
    coeff = _margin_coeffs(ys, num_classes)
    log_h = np.log(h + KL_FLOOR)
    log_p = np.log(protos + KL_FLOOR)
    # kl[i, c] = KL(h_i || proto_c)
    kl = np.sum(h * log_h, axis=1, keepdims=True) - h @ log_p.T
    gamma = np.sum(coeff * kl, axis=1)
    x = gamma - tau
    m = len(targets)
    anchor = tau - ctx.tau_init
    loss = float(np.sum(softplus(x)) / m + mu * np.sum(anchor * anchor) / m)

    d_gamma = expit(x) / m
    d_tau = -d_gamma + 2.0 * mu * anchor / m
    w = d_gamma[:, None] * coeff  # dL/dKL[i, c]
    # dKL(h||p)/dh_k = log(h_k+eps) + h_k/(h_k+eps) - log(p_k+eps)
    d_h = w.sum(axis=1, keepdims=True) * (log_h + h / (h + KL_FLOOR)) - w @ log_p
    np.add.at(d_probs, targets, d_h)
    # dKL(h||p)/dp_k = -h_k/(p_k+eps), then through the class means
    d_protos = -(w.T @ h) / (protos + KL_FLOOR)
    src = ctx.proto_nodes
    counts = np.bincount(labels[src], minlength=num_classes).astype(np.float64)
    np.add.at(d_probs, src, d_protos[labels[src]] / counts[labels[src]][:, None])
    return loss, d_probs, d_tau


def distill_loss(student_logits: np.ndarray, ctx: UnlearnContext) -> tuple[float, np.ndarray]:
    """Temperature-scaled ``KL(student || teacher) * T^2`` over remaining training nodes.

    Returns ``(loss, dL/dlogits)``.
    """
    nodes = ctx.proto_nodes
    d = np.zeros_like(student_logits)
    if len(nodes) == 0:
        return 0.0, d
    t = ctx.temperatures[nodes][:, None]
    p = softmax(student_logits[nodes] / t)
    q = softmax(ctx.teacher_logits[nodes] / t)
    kl = np.sum(p * (np.log(p + KL_FLOOR) - np.log(q + KL_FLOOR)), axis=1)
    n = len(nodes)
    loss = float(np.sum(kl * t[:, 0] ** 2) / n)
    d_p = np.log(p + KL_FLOOR) - np.log(q + KL_FLOOR) + p / (p + KL_FLOOR)
    d[nodes] = softmax_backward(p, d_p) * (t / n)  # T^2 * (1/T) / n
    return loss, d


# drivers ---------------------------------------------------------------------------

VARIANTS = ("mgu", "no_margin", "no_distill")


def _run(params_o: ModelParams, ctx: UnlearnContext, cfg: UnlearnConfig, variant: str) -> ModelParams:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    use_margin = variant != "no_margin" and cfg.lam > 0 and len(ctx.targets) > 0
    use_distill = variant != "no_distill"
    learn_tau = use_margin and cfg.tau_mode == "learnable"
    mu = cfg.tau_anchor_mu if learn_tau else 0.0

    values = {k: v.copy() for k, v in params_o.weights().items()}
    tau = ctx.tau_init.copy()
    if learn_tau:
        values["tau"] = tau
    opt = Adam(cfg.learning_rate)
    prop = ctx.prop_remaining
    history = []
    for epoch in range(1, cfg.epochs + 1):
        params = ModelParams(values["W1"], values["b1"], values["W2"], values["b2"])
        logits, cache = _forward(params, prop)
        total = 0.0
        d_logits = np.zeros_like(logits)
        grads: dict[str, np.ndarray] = {}
        if use_margin:
            probs = softmax(logits)
            lm, d_probs, d_tau = margin_loss(probs, ctx, values.get("tau", tau), mu)
            total += cfg.lam * lm
            d_logits += cfg.lam * softmax_backward(probs, d_probs)
            if learn_tau:
                grads["tau"] = cfg.lam * d_tau
        if use_distill:
            ld, d_dist = distill_loss(logits, ctx)
            total += ld
            d_logits += d_dist
        if not math.isfinite(total):
            raise UnlearnError(f"non-finite unlearning loss {total} at epoch {epoch}")
        history.append(total)
        grads.update(_backward(params, prop, cache, d_logits))
        values = opt.step(values, grads)
    ctx.meta["loss_history"] = history
    out = ModelParams(values["W1"], values["b1"], values["W2"], values["b2"])
    if learn_tau:
        ctx.meta["tau_final"] = values["tau"]
    return out


def unlearn_mgu(
    params_o: ModelParams, graph_full: Graph, request: UnlearnRequest, cfg: UnlearnConfig, *, ctx=None
) -> ModelParams:
    """Memorization-guided unlearning; returns the student weights (no ``tau``)."""
    ctx = ctx or build_context(params_o, graph_full, request, cfg)
    return _run(params_o, ctx, cfg, "mgu")


def unlearn_ablation(
    params_o: ModelParams,
    graph_full: Graph,
    request: UnlearnRequest,
    cfg: UnlearnConfig,
    variant: str,
    *,
    ctx=None,
) -> ModelParams:
    """``no_margin`` optimizes distillation alone, ``no_distill`` the margin term alone."""
    if variant not in ("no_margin", "no_distill"):
        raise ValueError(f"unknown ablation variant {variant!r}")
    ctx = ctx or build_context(params_o, graph_full, request, cfg)
    return _run(params_o, ctx, cfg, variant)


def unlearn_retrain(graph_full: Graph, request: UnlearnRequest, train_cfg: TrainConfig) -> ModelParams:
    """Gold standard: train from scratch on the remaining graph."""
    return train(apply_request(graph_full, request), train_cfg)
