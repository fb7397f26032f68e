"""Command-line entry point: one subcommand per pipeline stage plus the full runner.

Every subcommand takes a JSON config (``--config``) whose keys can be
overridden with ``--set key.path=value`` (value parsed as JSON when it
parses, else kept as a string); the common flags override those again.
Artifacts go under ``--out`` together with a ``manifest.json``.

Exit codes: 0 ok, 1 runtime failure, 2 configuration error. Failures print
one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .evaluation import SETTING_TO_SET, build_difficulty_sets, build_edge_sets, evaluate
from .experiment import (
    ArtifactWriter,
    ConfigError,
    ExperimentConfig,
    StageError,
    TaskScores,
    build_dataclass,
    csv_text,
    default_workers,
    load_dataset,
    require,
    resolve_mem_config,
    resolve_path,
    run_experiment,
    task_scores,
)
from .gcn import ModelFormatError, TrainConfig, load_model, save_model, train
from .graph import GraphError, SbmSpec, UnlearnRequest, gen_sbm
from .memorization import MemConfigError, MemTable, estimate_mem, margin_proxy_difficulty
from .unlearn import UnlearnConfig, UnlearnError, unlearn_ablation, unlearn_mgu, unlearn_retrain

log = logging.getLogger("mgu")

COMMANDS = ("train", "memscore", "difficulty", "sample", "unlearn", "evaluate", "experiment", "gen-sbm")


# config plumbing ---------------------------------------------------------------------


def set_dotted(doc: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not an object", dotted)
    cur[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}", text)
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(args) -> tuple[dict, Path | None]:
    doc: dict = {}
    base = None
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", "config")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}", "config") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object", "config")
        base = path.resolve().parent
    for item in args.set or []:
        set_dotted(doc, *parse_override(item))
    if args.out is not None:
        doc["out"] = args.out
    if args.workers is not None:
        doc["workers"] = args.workers
    return doc, base


def _read(doc, key, base) -> str:
    path = resolve_path(require(doc, key), base)
    if not path.exists():
        raise ConfigError(f"{key} file not found: {path}", key)
    return path.read_text(encoding="utf-8")


def _writer(doc, base) -> ArtifactWriter:
    return ArtifactWriter(resolve_path(require(doc, "out"), base))


def _workers(doc) -> int:
    return int(doc.get("workers", default_workers()))


def _finish(w: ArtifactWriter, command: str, doc: dict, t0: float, **extra):
    cfg = {k: v for k, v in doc.items() if k != "out"}
    w.finish({"command": command, "config": cfg, "wall_time_s": time.perf_counter() - t0, **extra})


def _table_text(header, rows, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    return csv_text(header, rows)


# subcommands --------------------------------------------------------------------------


def cmd_gen_sbm(doc, base, args):
    t0 = time.perf_counter()
    spec_doc = dict(require(doc, "spec"))
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    g = gen_sbm(build_dataclass(SbmSpec, spec_doc, "spec"))
    w = _writer(doc, base)
    w.write("graph.json", g.to_json())
    _finish(w, "gen-sbm", doc, t0)


def cmd_train(doc, base, args):
    t0 = time.perf_counter()
    g = load_dataset(require(doc, "graph"), base)
    cfg = build_dataclass(TrainConfig, doc.get("train"), "train")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    params = train(g, cfg)
    w = _writer(doc, base)
    w.write("model.json", save_model(params))
    _finish(w, "train", doc, t0, seed=cfg.seed)


def cmd_memscore(doc, base, args):
    t0 = time.perf_counter()
    g = load_dataset(require(doc, "graph"), base)
    tcfg = build_dataclass(TrainConfig, doc.get("train"), "train")
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    mcfg = resolve_mem_config(doc.get("mem", {}), g)
    table = estimate_mem(g, mcfg, tcfg, _workers(doc))
    w = _writer(doc, base)
    if args.format == "json":
        rows = [
            {"node_id": int(v), "delta_self": float(a), "delta_nbr": float(b), "mem": float(m)}
            for v, a, b, m in zip(table.node_ids, table.delta_self, table.delta_nbr, table.mem)
        ]
        w.write("mem_table.json", json.dumps(rows, indent=2) + "\n")
    else:
        w.write("mem_table.csv", table.to_csv())
    w.write("mem_table.meta.json", table.metadata_json() + "\n")
    _finish(w, "memscore", doc, t0)


def _load_table(doc, base) -> MemTable:
    text = _read(doc, "mem_table", base)
    meta_path = resolve_path(doc["mem_table"], base).with_suffix(".meta.json")
    meta = meta_path.read_text(encoding="utf-8") if meta_path.exists() else None
    if text.lstrip().startswith("["):
        rows = json.loads(text)
        return MemTable(
            np.array([r["node_id"] for r in rows], dtype=np.int64),
            np.array([r["delta_self"] for r in rows], dtype=np.float64),
            np.array([r["delta_nbr"] for r in rows], dtype=np.float64),
            np.array([r["mem"] for r in rows], dtype=np.float64),
            json.loads(meta).get("alpha", 0.5) if meta else 0.5,
        )
    return MemTable.from_csv(text, meta)


def cmd_difficulty(doc, base, args):
    t0 = time.perf_counter()
    g = load_dataset(require(doc, "graph"), base)
    task = doc.get("task", "node")
    if task not in ("node", "edge", "feature"):
        raise ConfigError(f"unknown task {task!r}", "task")
    source = doc.get("source", "mem")
    if source == "mem":
        scores = task_scores(g, _load_table(doc, base).scores(g.num_nodes), task)
    elif source == "margin_proxy":
        params = load_model(_read(doc, "model", base))
        proxy = margin_proxy_difficulty(params, g, doc.get("orientation", "as_written"))
        scores = task_scores(g, proxy.scores, task)
    else:
        raise ConfigError(f"unknown difficulty source {source!r}", "source")
    w = _writer(doc, base)
    if task == "edge":
        rows = [{"u": int(u), "v": int(v), "score": float(s)} for (u, v), s in zip(scores.edges, scores.edge_scores)]
        header = ("u", "v", "score")
    else:
        ids = g.train_nodes
        key = "node_id" if task == "node" else "feature_id"
        rows = [{key: int(i), "score": float(scores.node_scores[i])} for i in ids]
        header = (key, "score")
    w.write(f"{task}_scores.{args.format}", _table_text(header, rows, args.format))
    _finish(w, "difficulty", doc, t0, task=task, source=source)


def _read_scores(doc, base, g, task) -> TaskScores:
    text = _read(doc, "scores", base)
    rows = json.loads(text) if text.lstrip().startswith("[") else list(csv.DictReader(io.StringIO(text)))
    if task == "edge":
        edges = np.array([[int(r["u"]), int(r["v"])] for r in rows], dtype=np.int64).reshape(-1, 2)
        return TaskScores(np.full(g.num_nodes, np.nan), edges, np.array([float(r["score"]) for r in rows]))
    key = "node_id" if task == "node" else "feature_id"
    s = np.full(g.num_nodes, np.nan)
    for r in rows:
        s[int(r[key])] = float(r["score"])
    return TaskScores(s)


def cmd_sample(doc, base, args):
    t0 = time.perf_counter()
    g = load_dataset(require(doc, "graph"), base)
    task = doc.get("task", "node")
    setting = doc.get("setting", "easy")
    if setting not in SETTING_TO_SET:
        raise ConfigError(f"unknown setting {setting!r}", "setting")
    ratio = float(doc.get("ratio", 0.05))
    if not 0.0 < ratio <= 0.5:
        raise ConfigError("ratio must lie in (0, 0.5]", "ratio")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    scores = _read_scores(doc, base, g, task)
    if task == "edge":
        sets = build_edge_sets(scores.edges, scores.edge_scores, g, g.test_nodes, 100 * ratio, seed)
        req = UnlearnRequest.edges([tuple(e) for e in sets.get(SETTING_TO_SET[setting]).tolist()])
    else:
        sets = build_difficulty_sets(scores.node_scores, g, g.test_nodes, 100 * ratio, seed)
        ids = sets.get(SETTING_TO_SET[setting])
        req = UnlearnRequest.nodes(ids) if task == "node" else UnlearnRequest.features(ids)
    w = _writer(doc, base)
    w.write_json("request.json", req.to_dict())
    w.write_json("difficulty_sets.json", sets.to_dict())
    _finish(w, "sample", doc, t0, seed=seed)


def _request(doc, base) -> UnlearnRequest:
    try:
        return UnlearnRequest.from_dict(json.loads(_read(doc, "request", base)))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid request document: {exc}", "request") from None


def cmd_unlearn(doc, base, args):
    t0 = time.perf_counter()
    g = load_dataset(require(doc, "graph"), base)
    req = _request(doc, base)
    method = doc.get("method", "mgu")
    tcfg = build_dataclass(TrainConfig, doc.get("train"), "train")
    ucfg = build_dataclass(UnlearnConfig, doc.get("unlearn"), "unlearn")
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
        ucfg = dataclasses.replace(ucfg, seed=args.seed)
    if method == "retrain":
        params = unlearn_retrain(g, req, tcfg)
    else:
        params_o = load_model(_read(doc, "model", base))
        if method == "mgu":
            params = unlearn_mgu(params_o, g, req, ucfg)
        elif method in ("no_margin", "no_distill"):
            params = unlearn_ablation(params_o, g, req, ucfg, method)
        else:
            raise ConfigError(f"unknown method {method!r}", "method")
    w = _writer(doc, base)
    w.write("model.json", save_model(params))
    _finish(w, "unlearn", doc, t0, request=req.to_dict(), seed=ucfg.seed if method != "retrain" else tcfg.seed)


def cmd_evaluate(doc, base, args):
    t0 = time.perf_counter()
    g = load_dataset(require(doc, "graph"), base)
    req = _request(doc, base)
    params_u = load_model(_read(doc, "unlearned", base))
    params_r = load_model(_read(doc, "retrained", base))
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    rep = evaluate(params_u, params_r, g, req, seed=seed)
    w = _writer(doc, base)
    w.write("report.json", rep.to_json() + "\n")
    _finish(w, "evaluate", doc, t0, seed=seed)


def cmd_experiment(doc, base, args):
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    doc.setdefault("workers", default_workers())
    cfg = ExperimentConfig.from_dict(doc, base)
    out = run_experiment(cfg)
    print(out / "aggregate.csv")


HANDLERS = {
    "train": cmd_train,
    "memscore": cmd_memscore,
    "difficulty": cmd_difficulty,
    "sample": cmd_sample,
    "unlearn": cmd_unlearn,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "gen-sbm": cmd_gen_sbm,
}


# entry point ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgu", description="Memorization-guided graph unlearning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--workers", type=int, help="worker processes (default: available CPUs)")
        p.add_argument("--format", choices=("json", "csv"), default="csv", help="format of tabular outputs")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    return parser


def setup_logging():
    level = os.environ.get("MGU_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _fail(code: int, doc: dict) -> int:
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        doc, base = load_config(args)
        HANDLERS[args.command](doc, base, args)
    except ConfigError as exc:
        return _fail(2, {"error": "config", "field": exc.field, "message": str(exc)})
    except MemConfigError as exc:
        return _fail(2, {"error": "config", "field": "mem", "message": str(exc)})
    except StageError as exc:
        log.debug("stage failure", exc_info=exc.cause)
        return _fail(1, {"error": "runtime", "stage": exc.stage, "message": str(exc.cause)})
    except (GraphError, ModelFormatError, UnlearnError, ValueError, RuntimeError, OSError) as exc:
        log.debug("failure", exc_info=True)
        return _fail(1, {"error": "runtime", "stage": args.command, "message": str(exc)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
