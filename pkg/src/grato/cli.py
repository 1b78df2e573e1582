"""Command-line entry point: ``grato {search,train,eval,metrics,gen}``.

Exit codes: 0 ok, 2 configuration, 3 numerical divergence, 4 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .graph import ConfigError, Graph, GraphLoadError, SbmConfig, generate_sbm, load_graph, row_normalize_features, save_graph
from .metrics import EvalReport, MetricError, integrative_rank, mad, mad_tgt
from .objective import LossConfig
from .ops import DEFAULT_HYPER, OP_KINDS
from .search import (
    DivergenceError,
    SearchConfig,
    report_for,
    retrain_derived,
    search_config_dict,
    search_loop,
)
from .seeding import substream_seed
from .supernet import AGGREGATIONS, BlockSpec, DerivedArch, build_discrete_model

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("grato")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class IOFailure(Exception):
    """Reading or writing an artifact failed."""


# ---------------------------------------------------------------- configuration


@dataclasses.dataclass(frozen=True)
class RunConfig:
    graph: Optional[str] = None
    sbm: SbmConfig = SbmConfig()
    block: BlockSpec = BlockSpec()
    search: SearchConfig = SearchConfig()
    loss: LossConfig = LossConfig()
    hidden_dim: int = 256
    blocks: int = 2
    # when set, the retrained model repeats the block until B * longest subchain reaches this depth
    target_depth: Optional[int] = None
    op_hyper: dict = dataclasses.field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_HYPER.items()})
    aggregation: str = "sum"
    mad_split: str = "all"
    row_normalize: bool = False
    seed: int = 0
    out: str = "runs"

    def to_dict(self) -> dict:
        return {
            "graph": self.graph,
            "sbm": dataclasses.asdict(self.sbm),
            "block": {"n_intermediate": self.block.n_intermediate, "top_k": self.block.top_k, "op_kinds": list(self.block.op_kinds)},
            "search": search_config_dict(self.search),
            "loss": dataclasses.asdict(self.loss),
            "hidden_dim": self.hidden_dim,
            "blocks": self.blocks,
            "target_depth": self.target_depth,
            "op_hyper": self.op_hyper,
            "aggregation": self.aggregation,
            "mad_split": self.mad_split,
            "row_normalize": self.row_normalize,
            "seed": self.seed,
            "out": self.out,
        }


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}]: expected a table")
    return sec


def _build(cls, name: str, values: dict, **fixed):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{name}]: unknown field(s) {', '.join(unknown)}")
    try:
        obj = cls(**{**values, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None
    return obj


_TOP_LEVEL = {"graph", "hidden_dim", "blocks", "target_depth", "aggregation", "mad_split", "row_normalize", "seed", "out"}
_SECTIONS = {"sbm", "block", "search", "loss", "op_hyper"}


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        if path.suffix == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def resolve_config(doc: dict, overrides: Optional[dict] = None) -> RunConfig:
    """Merge a parsed config document with flag overrides and validate every field."""
    doc = json.loads(json.dumps(doc))  # private copy
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            sec, field = key.split(".", 1)
            doc.setdefault(sec, {})[field] = value
        else:
            doc[key] = value
    unknown = sorted(set(doc) - _TOP_LEVEL - _SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {', '.join(unknown)}")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: expected a non-negative integer")

    sbm_doc = dict(_section(doc, "sbm"))
    sbm_doc.setdefault("seed", substream_seed(seed, "sbm"))
    sbm = _build(SbmConfig, "sbm", sbm_doc)
    try:
        sbm.validate()
    except ConfigError as exc:
        raise ConfigError(f"[sbm]: {exc}") from None

    block_doc = dict(_section(doc, "block"))
    if "op_kinds" in block_doc:
        block_doc["op_kinds"] = tuple(block_doc["op_kinds"])
    block = _build(BlockSpec, "block", block_doc)

    search_doc = dict(_section(doc, "search"))
    if "order" in search_doc:
        search_doc["order"] = str(search_doc["order"]).replace("-", "_")
    if "betas" in search_doc:
        search_doc["betas"] = tuple(search_doc["betas"])
    search = _build(SearchConfig, "search", search_doc, seed=seed)

    loss = _build(LossConfig, "loss", dict(_section(doc, "loss")))
    if loss.lambda_ovm < 0 or loss.n_sample_pairs < 1:
        raise ConfigError("[loss]: need lambda_ovm >= 0 and n_sample_pairs >= 1")

    op_hyper = {k: dict(v) for k, v in DEFAULT_HYPER.items()}
    for kind, hyper in _section(doc, "op_hyper").items():
        if kind not in OP_KINDS:
            raise ConfigError(f"[op_hyper]: unknown operation {kind!r}")
        if not isinstance(hyper, dict):
            raise ConfigError(f"[op_hyper.{kind}]: expected a table")
        bad = sorted(set(hyper) - set(DEFAULT_HYPER[kind]))
        if bad:
            raise ConfigError(f"[op_hyper.{kind}]: unknown field(s) {', '.join(bad)}")
        op_hyper[kind].update(hyper)
    for kind, hyper in op_hyper.items():
        for key in ("p", "rate"):
            if key in hyper and not 0.0 <= float(hyper[key]) < 1.0:
                raise ConfigError(f"[op_hyper.{kind}]: {key} must lie in [0, 1)")
    if int(op_hyper["sgc"]["K"]) < 1:
        raise ConfigError("[op_hyper.sgc]: K must be >= 1")

    defaults = {f.name: f.default for f in dataclasses.fields(RunConfig)}

    def _int(name, minimum, allow_none=False):
        v = doc.get(name, defaults[name])
        if v is None and allow_none:
            return None
        if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
            raise ConfigError(f"{name}: expected an integer >= {minimum}")
        return v

    aggregation = doc.get("aggregation", "sum")
    if aggregation not in AGGREGATIONS:
        raise ConfigError(f"aggregation: expected one of {AGGREGATIONS}")
    mad_split = doc.get("mad_split", "all")
    if mad_split not in ("all", "train", "val", "test"):
        raise ConfigError("mad_split: expected one of all, train, val, test")
    row_normalize = doc.get("row_normalize", False)
    if not isinstance(row_normalize, bool):
        raise ConfigError("row_normalize: expected true or false")
    graph = doc.get("graph")
    if graph is not None and not isinstance(graph, str):
        raise ConfigError("graph: expected a file path")

    return RunConfig(
        graph=graph,
        sbm=sbm,
        block=block,
        search=search,
        loss=loss,
        hidden_dim=_int("hidden_dim", 1),
        blocks=_int("blocks", 1),
        target_depth=_int("target_depth", 1, allow_none=True),
        op_hyper=op_hyper,
        aggregation=aggregation,
        mad_split=mad_split,
        row_normalize=row_normalize,
        seed=seed,
        out=str(doc.get("out", "runs")),
    )


def load_run_graph(cfg: RunConfig) -> Graph:
    if cfg.graph is None:
        g = generate_sbm(cfg.sbm)
    else:
        try:
            g = load_graph(cfg.graph)
        except GraphLoadError as exc:
            raise ConfigError(f"graph: {exc}") from None
    return row_normalize_features(g) if cfg.row_normalize else g


# ---------------------------------------------------------------- artifacts


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IOFailure(f"{path}: {exc.strerror}") from None


def _provenance(cfg: RunConfig) -> dict:
    # the output location is where artifacts go, not how they were made
    doc = cfg.to_dict()
    del doc["out"]
    return {"config": doc, "seed": cfg.seed}


def save_model(path: Path, net, arch: DerivedArch, in_dim: int, num_classes: int, cfg: RunConfig) -> None:
    meta = {"arch": arch.to_dict(), "in_dim": in_dim, "num_classes": num_classes, **_provenance(cfg)}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **net.state_dict())
    except OSError as exc:
        raise IOFailure(f"{path}: {exc.strerror}") from None


def load_model(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            state = {k: z[k] for k in z.files if k != "__meta__"}
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from None
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: not a model artifact ({exc})") from None
    cfg = resolve_config(meta["config"])
    arch = DerivedArch.from_dict(meta["arch"])
    net = build_discrete_model(arch, meta["in_dim"], meta["num_classes"], op_hyper=cfg.op_hyper, aggregation=cfg.aggregation)
    net.load_state_dict(state)
    return net, meta, cfg


def retrain_arch(arch: DerivedArch, cfg: RunConfig) -> DerivedArch:
    if cfg.target_depth is None:
        return arch.with_blocks(cfg.blocks)
    chain = arch.longest_subchain()
    if chain == 0:
        log.warning("derived block has no propagation operation; keeping B=%d", cfg.blocks)
        return arch.with_blocks(cfg.blocks)
    return arch.with_blocks(math.ceil(cfg.target_depth / chain))


def _report_doc(report: EvalReport, cfg: RunConfig, **extra) -> dict:
    return {"report": report.to_dict(), **extra, **_provenance(cfg)}


def run_search(cfg: RunConfig, out: Path) -> dict:
    """Search, retrain the best derived block, and write every artifact under ``out``."""
    g = load_run_graph(cfg)
    lines: list[str] = []

    def on_epoch(rec):
        lines.append(json.dumps({"phase": "search", **rec}, sort_keys=True))

    res = search_loop(
        g, cfg.block, cfg.search, cfg.loss, cfg.blocks, cfg.hidden_dim, cfg.op_hyper, on_epoch, cfg.aggregation
    )
    best = res.blocklist.best()
    if best is None:
        raise ConfigError("search: max_epochs=0 leaves no architecture to retrain")
    arch = retrain_arch(best, cfg)
    arch_doc = {**arch.to_dict(), **_provenance(cfg)}
    _write(out / "arch.json", _dump(arch_doc))

    def on_retrain(rec):
        lines.append(json.dumps({"phase": "retrain", **rec}, sort_keys=True))

    rr = retrain_derived(
        arch, g, cfg.search, cfg.loss, cfg.seed, cfg.op_hyper, cfg.mad_split, on_retrain, cfg.aggregation
    )
    _write(out / "log.jsonl", "".join(line + "\n" for line in lines))
    doc = _report_doc(
        rr.report,
        cfg,
        best_epoch=rr.best_epoch,
        blocklist_size=len(res.blocklist),
        effective_depth=arch.effective_depth(),
    )
    _write(out / "report.json", _dump(doc))
    save_model(out / "model.npz", rr.net, arch, g.feature_dim, g.num_classes, cfg)
    return doc


# ---------------------------------------------------------------- commands


def _overrides(args) -> dict:
    order = getattr(args, "order", None)
    return {
        "seed": getattr(args, "seed", None),
        "out": getattr(args, "out", None),
        "blocks": getattr(args, "blocks", None),
        "graph": getattr(args, "graph", None),
        "search.order": order.replace("-", "_") if order else None,
        "loss.lambda_ovm": getattr(args, "lambda_ovm", None),
    }


def _config_from_args(args, seed: Optional[int] = None) -> RunConfig:
    doc = read_config_file(args.config) if args.config else {}
    over = _overrides(args)
    if seed is not None:
        over["seed"] = seed
    return resolve_config(doc, over)


def _search_one(config_path, overrides: dict, out: str) -> tuple[int, str]:
    """Worker body for ``--jobs``: one isolated seed, returns (exit code, message)."""
    try:
        doc = read_config_file(config_path) if config_path else {}
        cfg = resolve_config(doc, overrides)
        run_search(cfg, Path(out))
        return EXIT_OK, f"seed {cfg.seed}: wrote {out}"
    except ConfigError as exc:
        return EXIT_CONFIG, f"config error: {exc}"
    except (DivergenceError, FloatingPointError) as exc:
        return EXIT_NUMERIC, f"numerical divergence: {exc}"
    except IOFailure as exc:
        return EXIT_IO, f"I/O error: {exc}"


def cmd_search(args) -> int:
    seeds = args.seeds or [None]
    base = _config_from_args(args)  # validates before any work starts
    jobs = []
    for s in seeds:
        over = _overrides(args)
        if s is not None:
            over["seed"] = s
        out = Path(base.out) / f"seed-{s}" if args.seeds else Path(base.out)
        jobs.append((args.config, over, str(out)))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_search_one, *zip(*jobs)))
    else:
        results = [_search_one(*job) for job in jobs]
    for code, msg in results:
        print(msg, file=sys.stderr if code else sys.stdout)
    return max(code for code, _ in results)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    try:
        arch_doc = json.loads(Path(args.arch).read_text())
    except OSError as exc:
        raise IOFailure(f"{args.arch}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.arch}: {exc}") from None
    try:
        arch = DerivedArch.from_dict(arch_doc)
    except ValueError as exc:
        raise ConfigError(f"{args.arch}: {exc}") from None
    if args.blocks is not None:
        arch = arch.with_blocks(args.blocks)
    g = load_run_graph(cfg)
    out = Path(cfg.out)
    lines: list[str] = []
    rr = retrain_derived(
        arch, g, cfg.search, cfg.loss, cfg.seed, cfg.op_hyper, cfg.mad_split,
        lambda rec: lines.append(json.dumps({"phase": "retrain", **rec}, sort_keys=True)), cfg.aggregation,
    )
    _write(out / "log.jsonl", "".join(line + "\n" for line in lines))
    _write(out / "report.json", _dump(_report_doc(rr.report, cfg, best_epoch=rr.best_epoch, arch=arch.to_dict())))
    save_model(out / "model.npz", rr.net, arch, g.feature_dim, g.num_classes, cfg)
    print(rr.report.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    net, meta, cfg = load_model(args.model)
    try:
        g = load_graph(args.graph)
    except GraphLoadError as exc:
        raise ConfigError(str(exc)) from None
    if g.feature_dim != meta["in_dim"]:
        raise ConfigError(f"graph feature_dim {g.feature_dim} does not match the model's {meta['in_dim']}")
    if g.num_classes != meta["num_classes"]:
        raise ConfigError(f"graph num_classes {g.num_classes} does not match the model's {meta['num_classes']}")
    report = report_for(net, g, args.split, cfg.mad_split)
    doc = _report_doc(report, cfg, split=args.split, model=str(args.model))
    if args.out:
        _write(Path(args.out) / "report.json", _dump(doc))
    print(report.to_json())
    return EXIT_OK


def _load_array(path, what: str) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix == ".npy":
            return np.load(path, allow_pickle=False)
        if path.suffix == ".json":
            return np.asarray(json.loads(path.read_text()))
        return np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None, ndmin=1)
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{what} {path}: {exc}") from None


def cmd_metrics(args) -> int:
    out = Path(args.out) if args.out else None
    if args.table:
        try:
            table = json.loads(Path(args.table).read_text())
        except OSError as exc:
            raise IOFailure(f"{args.table}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.table}: {exc}") from None
        try:
            ranked = integrative_rank(table)
        except MetricError as exc:
            raise ConfigError(str(exc)) from None
        if out:
            _write(out / "rank.csv", ranked.to_csv())
        print(ranked.to_text())
        return EXIT_OK
    if not args.embeddings:
        raise ConfigError("metrics: pass --embeddings (optionally with --labels) or --table")
    x = _load_array(args.embeddings, "embeddings")
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2:
        raise ConfigError(f"embeddings must be a 2-D array, got {x.ndim} dimensions")
    doc: dict[str, Any] = {"num_nodes": int(x.shape[0]), "mad": mad(x)}
    if args.labels:
        y = _load_array(args.labels, "labels").astype(np.int64).reshape(-1)
        if y.shape[0] != x.shape[0]:
            raise ConfigError(f"labels has {y.shape[0]} entries for {x.shape[0]} embedding rows")
        doc["mad_tgt"] = mad_tgt(x, y) if np.unique(y).size > 1 else None
    if out:
        _write(out / "report.json", _dump(doc))
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_gen(args) -> int:
    cfg = _config_from_args(args)
    if args.graph_out is None:
        raise ConfigError("gen: --graph-out is required")
    g = generate_sbm(cfg.sbm)
    try:
        save_graph(g, args.graph_out)
    except OSError as exc:
        raise IOFailure(f"{args.graph_out}: {exc.strerror}") from None
    print(f"wrote {g.num_nodes} nodes, {g.adj.num_pairs} undirected edges to {args.graph_out}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grato", description="Differentiable architecture search for deep GNNs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default=None):
        sp.add_argument("--config", help="TOML or JSON run configuration")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--graph", help="graph JSON file (overrides the config; default is a generated SBM)")

    sp = sub.add_parser("search", help="search a block, retrain it, and write arch.json/log.jsonl/report.json")
    common(sp)
    sp.add_argument("--order", choices=("first", "second", "paper-literal"))
    sp.add_argument("--lambda-ovm", type=float, dest="lambda_ovm")
    sp.add_argument("--blocks", type=int)
    sp.add_argument("--seeds", type=int, nargs="+", help="run several seeds, each into OUT/seed-N")
    sp.add_argument("--jobs", type=int, default=1, help="parallel workers for --seeds")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("train", help="train a derived architecture from scratch")
    common(sp)
    sp.add_argument("--arch", required=True, help="arch.json from a search")
    sp.add_argument("--lambda-ovm", type=float, dest="lambda_ovm")
    sp.add_argument("--blocks", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a saved model on a graph")
    sp.add_argument("--model", required=True)
    sp.add_argument("--graph", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("metrics", help="MAD/MAD^tgt of embeddings, or integrative ranking of a results table")
    sp.add_argument("--embeddings")
    sp.add_argument("--labels")
    sp.add_argument("--table", help="JSON object: method -> {acc, f1, mad}")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("gen", help="generate a stochastic-block-model graph")
    common(sp)
    sp.add_argument("--graph-out", dest="graph_out", required=True)
    sp.set_defaults(func=cmd_gen)
    return p


def _setup_logging() -> None:
    level = os.environ.get("GRATO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
