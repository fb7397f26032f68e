"""Configuration and the end-to-end experiment runner.

A run loads or generates a graph, estimates difficulty once, then for
every seed trains the original model and, per setting, retrains the gold
standard, runs MGU and both ablations, and scores each against the
retrained model. Every file written goes into a manifest with its sha256.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import (
    SETTING_TO_SET,
    EvalReport,
    build_difficulty_sets,
    build_edge_sets,
    centrality_contrast,
    evaluate,
    histogram_svg,
)
from .gcn import TrainConfig, load_model, save_model, train
from .graph import Graph, GraphError, SbmSpec, UnlearnRequest, apply_request, gen_sbm, load_csv, load_linqs, split
from .memorization import MemConfig, MemTable, edge_difficulty, estimate_mem, row_feature_difficulty
from .unlearn import UnlearnConfig, build_context, unlearn_ablation, unlearn_mgu

log = logging.getLogger(__name__)

METHODS = ("mgu", "no_margin", "no_distill")
METHOD_LABELS = {"mgu": "MGU", "no_margin": "w/o Margin", "no_distill": "w/o Distill"}
TASKS = ("node", "edge", "feature")
EXACT_MAX_TRAIN = 400
AGGREGATE_COLUMNS = (
    "task",
    "method",
    "label",
    "setting",
    "runs",
    "tou_mean",
    "tou_std",
    "diff_deleted_mean",
    "diff_remaining_mean",
    "diff_test_mean",
)


class ConfigError(ValueError):
    """Bad or missing configuration; ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# config parsing ----------------------------------------------------------------


def require(doc: dict, key: str, where: str = ""):
    name = f"{where}.{key}" if where else key
    if not isinstance(doc, dict) or key not in doc:
        raise ConfigError(f"missing config field {name!r}", name)
    return doc[key]


def build_dataclass(cls, doc: dict | None, where: str):
    """Instantiate ``cls`` from a dict, rejecting unknown keys by name."""
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where!r} must be an object", where)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"unknown config field '{where}.{key}'", f"{where}.{key}")
    kwargs = dict(doc)
    if cls is SbmSpec and "blocks" in kwargs:
        kwargs["blocks"] = tuple(kwargs["blocks"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}", where) from None


def resolve_path(p: str, base: Path | None) -> Path:
    path = Path(p)
    if not path.is_absolute() and base is not None:
        path = base / path
    return path


def load_dataset(doc, base: Path | None = None) -> Graph:
    """Graph from a dataset description or a path to a graph JSON document.

    ``{"source": "sbm", "spec": {...}}`` generates (already split);
    ``{"source": "linqs", "content": p, "cites": p, "split": {...}}`` and
    ``{"source": "csv", "nodes": p, "edges": p, "split": {...}}`` load and
    then split with ``train_frac`` (default 0.8) and ``seed`` (default 0).
    """
    if isinstance(doc, str):
        path = resolve_path(doc, base)
        if not path.exists():
            raise ConfigError(f"graph file not found: {path}", "graph")
        return Graph.from_json(path.read_text(encoding="utf-8"))
    source = require(doc, "source", "dataset")
    if source == "sbm":
        return gen_sbm(build_dataclass(SbmSpec, require(doc, "spec", "dataset"), "dataset.spec"))
    if source == "linqs":
        paths = [resolve_path(require(doc, k, "dataset"), base) for k in ("content", "cites")]
        loader = load_linqs
    elif source == "csv":
        paths = [resolve_path(require(doc, k, "dataset"), base) for k in ("nodes", "edges")]
        loader = load_csv
    else:
        raise ConfigError(f"unknown dataset source {source!r}", "dataset.source")
    for p in paths:
        if not p.exists():
            raise ConfigError(f"dataset file not found: {p}", "dataset")
    g = loader(*paths)
    sp = doc.get("split", {})
    try:
        return split(g, float(sp.get("train_frac", 0.8)), int(sp.get("seed", 0)))
    except GraphError as exc:
        raise ConfigError(str(exc), "dataset.split") from None


@dataclass
class ExperimentConfig:
    dataset: dict | str
    out: str
    train: TrainConfig = field(default_factory=TrainConfig)
    mem: dict = field(default_factory=dict)  # MemConfig fields; estimator may be "auto"
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    task: str = "node"
    settings: tuple[str, ...] = ("easy", "random", "hard")
    ratio: float = 0.05
    seeds: tuple[int, ...] = (0, 1, 2)
    workers: int = 1
    base_dir: str | None = None

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}", key)
        cfg = cls(
            dataset=require(doc, "dataset"),
            out=require(doc, "out"),
            train=build_dataclass(TrainConfig, doc.get("train"), "train"),
            mem=dict(doc.get("mem", {})),
            unlearn=build_dataclass(UnlearnConfig, doc.get("unlearn"), "unlearn"),
            task=doc.get("task", "node"),
            settings=tuple([doc["settings"]] if isinstance(doc.get("settings"), str) else doc.get("settings", cls.settings)),
            ratio=float(doc.get("ratio", 0.05)),
            seeds=tuple(int(s) for s in doc.get("seeds", (0, 1, 2))),
            workers=int(doc.get("workers", 1)),
            base_dir=str(base_dir) if base_dir is not None else None,
        )
        cfg.validate()
        return cfg

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}", "task")
        for s in self.settings:
            if s not in SETTING_TO_SET:
                raise ConfigError(f"unknown setting {s!r}", "settings")
        if not self.settings:
            raise ConfigError("no settings given", "settings")
        if not 0.0 < self.ratio <= 0.5:
            raise ConfigError("ratio must lie in (0, 0.5]", "ratio")
        if not self.seeds:
            raise ConfigError("no seeds given", "seeds")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1", "workers")
        mem = dict(self.mem)
        mem.pop("estimator", None)
        build_dataclass(MemConfig, mem, "mem")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "out": self.out,
            "train": dataclasses.asdict(self.train),
            "mem": self.mem,
            "unlearn": dataclasses.asdict(self.unlearn),
            "task": self.task,
            "settings": list(self.settings),
            "ratio": self.ratio,
            "seeds": list(self.seeds),
        }


def resolve_mem_config(mem: dict, graph: Graph) -> MemConfig:
    """``estimator: auto`` (the default) picks exact leave-one-out up to 400 training nodes."""
    doc = dict(mem)
    est = doc.get("estimator", "auto")
    if est == "auto":
        doc["estimator"] = "exact_loo" if len(graph.train_nodes) <= EXACT_MAX_TRAIN else "subsample"
    return build_dataclass(MemConfig, doc, "mem")


# artifacts ----------------------------------------------------------------------


class ArtifactWriter:
    """Single point through which run files are written and hashed."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.entries: dict[str, dict] = {}

    def write(self, rel: str, data: str | bytes) -> Path:
        raw = data.encode("utf-8") if isinstance(data, str) else data
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(raw)
        self.entries[rel] = {"path": rel, "sha256": hashlib.sha256(raw).hexdigest(), "bytes": len(raw)}
        return path

    def write_json(self, rel: str, doc) -> Path:
        return self.write(rel, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def finish(self, extra: dict | None = None) -> Path:
        doc = {"files": [self.entries[k] for k in sorted(self.entries)]}
        if extra:
            doc.update(extra)
        path = self.root / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def csv_text(header, rows) -> str:
    """CSV with a fixed column order; rows are dicts keyed by column. Floats keep full precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(r[h]) if isinstance(r[h], float) else r[h] for h in header])
    return buf.getvalue()


# requests from difficulty -----------------------------------------------------------


@dataclass
class TaskScores:
    """Difficulty per deletable element for one task."""

    node_scores: np.ndarray  # per node, nan off the training set
    edges: np.ndarray | None = None
    edge_scores: np.ndarray | None = None


def task_scores(graph: Graph, nodes: np.ndarray, task: str) -> TaskScores:
    """Lift per-node difficulty to the elements ``task`` deletes."""
    if task == "node":
        return TaskScores(nodes)
    if task == "feature":
        return TaskScores(row_feature_difficulty(graph, nodes))
    edges, scores = edge_difficulty(graph, nodes)
    return TaskScores(nodes, edges, scores)


def make_request(graph: Graph, scores: TaskScores, task: str, setting: str, ratio: float, seed: int) -> UnlearnRequest:
    """Deletion request for one setting: the first ``ratio`` share of that ranking."""
    name = SETTING_TO_SET[setting]
    pct = 100.0 * ratio
    if task == "edge":
        sets = build_edge_sets(scores.edges, scores.edge_scores, graph, graph.test_nodes, pct, seed)
        return UnlearnRequest.edges([tuple(e) for e in sets.get(name).tolist()])
    sets = build_difficulty_sets(scores.node_scores, graph, graph.test_nodes, pct, seed)
    ids = sets.get(name)
    return UnlearnRequest.nodes(ids) if task == "node" else UnlearnRequest.features(ids)


# the runner ------------------------------------------------------------------------------

_CELL: dict = {}


def _init_cells(graph, cfg_doc, scores):
    _CELL.update(graph=graph, cfg=cfg_doc, scores=scores)


def _train_original(seed: int) -> bytes:
    cfg = dataclasses.replace(_CELL["cfg"]["train"], seed=seed)
    return save_model(train(_CELL["graph"], cfg))


def _run_cell(job) -> dict:
    """One (seed, setting) cell: retrain, MGU, both ablations, evaluations."""
    seed, setting, original = job
    g, c, scores = _CELL["graph"], _CELL["cfg"], _CELL["scores"]
    params_o = load_model(original)
    req = make_request(g, scores, c["task"], setting, c["ratio"], seed)
    train_cfg = dataclasses.replace(c["train"], seed=seed)
    ucfg = dataclasses.replace(c["unlearn"], seed=seed)
    t0 = time.perf_counter()
    params_r = train(apply_request(g, req), train_cfg)
    timings = {"retrain": time.perf_counter() - t0}
    ctx = build_context(params_o, g, req, ucfg)
    models = {"retrained": save_model(params_r)}
    reports = {}
    for method in METHODS:
        t0 = time.perf_counter()
        if method == "mgu":
            params_u = unlearn_mgu(params_o, g, req, ucfg, ctx=ctx)
        else:
            params_u = unlearn_ablation(params_o, g, req, ucfg, method, ctx=ctx)
        timings[method] = time.perf_counter() - t0
        rep = evaluate(params_u, params_r, g, req, seed=seed)
        rep.meta.update({"method": method, "setting": setting, "seed": seed, "deleted": len(req.node_ids or req.edge_pairs)})
        reports[method] = rep.to_dict()
        models[method] = save_model(params_u)
    return {"seed": seed, "setting": setting, "request": req.to_dict(), "models": models, "reports": reports, "timings": timings}


def _pool_map(fn, items, workers, initargs):
    if workers <= 1:
        _init_cells(*initargs)
        try:
            return [fn(x) for x in items]
        finally:
            _CELL.clear()
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_cells, initargs=initargs) as ex:
        return list(ex.map(fn, items))


def aggregate(reports: list[dict], task: str, settings, methods=METHODS) -> list[dict]:
    """Mean and sample standard deviation per (method, setting) over seeds."""
    rows = []
    for method in methods:
        for setting in settings:
            cell = [r for r in reports if r["meta"]["method"] == method and r["meta"]["setting"] == setting]
            tou = [r["tou"] for r in cell]
            rows.append(
                {
                    "task": task,
                    "method": method,
                    "label": METHOD_LABELS[method],
                    "setting": setting,
                    "runs": len(cell),
                    "tou_mean": statistics.fmean(tou) if tou else math.nan,
                    "tou_std": statistics.stdev(tou) if len(tou) > 1 else 0.0,
                    "diff_deleted_mean": statistics.fmean(r["diff_deleted"] for r in cell) if cell else math.nan,
                    "diff_remaining_mean": statistics.fmean(r["diff_remaining"] for r in cell) if cell else math.nan,
                    "diff_test_mean": statistics.fmean(r["diff_test"] for r in cell) if cell else math.nan,
                }
            )
    return rows


def _stage(name: str, fn, *args, **kwargs):
    log.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_experiment(cfg: ExperimentConfig, mem_table: MemTable | None = None) -> Path:
    """Run the full pipeline and return the output directory.

    ``mem_table`` lets callers reuse a memorization table computed earlier
    for the same graph and configuration.
    """
    base = Path(cfg.base_dir) if cfg.base_dir else None
    out = resolve_path(cfg.out, base)
    w = ArtifactWriter(out)
    wall = {}
    w.write_json("config.json", {k: v for k, v in cfg.to_dict().items() if k != "out"})

    t0 = time.perf_counter()
    graph = _stage("load", load_dataset, cfg.dataset, base)
    wall["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    mcfg = _stage("memorization", resolve_mem_config, cfg.mem, graph)
    if mem_table is None:
        mem_table = _stage("memorization", estimate_mem, graph, mcfg, cfg.train, cfg.workers)
    wall["memorization"] = time.perf_counter() - t0
    w.write("mem_table.csv", mem_table.to_csv())
    w.write("mem_table.json", mem_table.metadata_json() + "\n")
    scores = _stage("difficulty", task_scores, graph, mem_table.scores(graph.num_nodes), cfg.task)
    w.write("mem_histogram.svg", histogram_svg(mem_table.mem, title="memorization scores", xlabel="mem"))
    sets = _stage("sets", build_difficulty_sets, scores.node_scores, graph, graph.test_nodes, 100.0 * cfg.ratio, 0)
    w.write_json("difficulty_sets.json", sets.to_dict())
    cent = _stage("centrality", centrality_contrast, graph, sets)
    w.write("centrality.csv", csv_text(("metric", "easy", "hard", "easy_over_hard"), cent))

    cell_cfg = {"train": cfg.train, "unlearn": cfg.unlearn, "task": cfg.task, "ratio": cfg.ratio}
    initargs = (graph, cell_cfg, scores)
    t0 = time.perf_counter()
    originals = _stage("train_original", _pool_map, _train_original, list(cfg.seeds), cfg.workers, initargs)
    wall["train_original"] = time.perf_counter() - t0
    for seed, blob in zip(cfg.seeds, originals):
        w.write(f"models/original_s{seed}.json", blob)

    jobs = [(seed, setting, blob) for seed, blob in zip(cfg.seeds, originals) for setting in cfg.settings]
    t0 = time.perf_counter()
    cells = _stage("unlearn", _pool_map, _run_cell, jobs, cfg.workers, initargs)
    wall["unlearn"] = time.perf_counter() - t0

    reports, timings = [], []
    for cell in cells:
        seed, setting = cell["seed"], cell["setting"]
        w.write_json(f"requests/{setting}_s{seed}.json", cell["request"])
        for name, blob in cell["models"].items():
            w.write(f"models/{name}_{setting}_s{seed}.json", blob)
        for method, rep in cell["reports"].items():
            w.write(f"reports/{method}_{setting}_s{seed}.json", EvalReport.from_dict(rep).to_json())
            reports.append(rep)
        timings.append({"seed": seed, "setting": setting, **cell["timings"]})
    rows = aggregate(reports, cfg.task, cfg.settings)
    w.write("aggregate.csv", csv_text(AGGREGATE_COLUMNS, rows))
    w.write_json("timings.json", {"stages": wall, "cells": timings})
    w.finish({"graph": {"nodes": graph.num_nodes, "edges": graph.num_edges, "train": int(graph.train_mask.sum())}})
    return out


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
