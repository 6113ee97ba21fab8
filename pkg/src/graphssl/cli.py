"""Command line pipeline: gen-data, build-graph, partition, plan, train, eval.

Stages hand off through files in the run directory (``--out``). Each
command accepts ``--config``, repeated ``--set key=value`` overrides and
``--seed``; the resolved configuration is written to ``<out>/run.cfg``.
On failure a single ``error module=... kind=... msg=...`` line goes to
stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import batching, dataio, engine, knngraph, model, partitioner
from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, FormatError, GraphSSLError

log = logging.getLogger("graphssl")


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.dumps())
    return cfg, out


def _need(path: Path, module: str) -> Path:
    if not path.exists():
        raise FormatError(f"missing input file {path}", module)
    return path


def _emit(payload: dict):
    print(json.dumps(payload, sort_keys=True))


def _load_train(cfg, out, labels_key="labels") -> dataio.DataSet:
    return dataio.load_dataset(_need(cfg.path("features", out), "dataio"),
                               _need(cfg.path(labels_key, out), "dataio"))


def cmd_gen_data(cfg: RunConfig, out: Path, args):
    full = dataio.generate_synthetic(cfg.synthetic_spec())
    train, held = dataio.split_dataset(full, cfg["data.eval_n"], cfg["seed"])
    partial = dataio.drop_labels(train, cfg["data.label_ratio"], cfg["seed"])
    dataio.save_dataset(partial, cfg.path("features", out), cfg.path("labels", out))
    dataio.save_labels(train.labels, train.num_classes, cfg.path("full_labels", out))
    dataio.save_dataset(held, cfg.path("eval_features", out), cfg.path("eval_labels", out))
    _emit({"command": "gen-data", "n": train.n, "eval_n": held.n, "labeled": partial.num_labeled})


def cmd_build_graph(cfg: RunConfig, out: Path, args):
    ds = dataio.load_dataset(_need(cfg.path("features", out), "dataio"))
    gcfg = cfg.graph_config()
    sigma = knngraph.median_sigma(ds, gcfg.k_nn) if gcfg.sigma == "median" else float(gcfg.sigma)
    g = knngraph.build_knn(ds, knngraph.GraphConfig(gcfg.k_nn, sigma, gcfg.distance_exponent))
    knngraph.save_graph(g, cfg.path("graph", out))
    _emit({"command": "build-graph", "n": g.n, "nnz": g.nnz, "sigma": sigma,
           "mean_degree": float(g.degrees.mean())})


def cmd_partition(cfg: RunConfig, out: Path, args):
    g = knngraph.load_graph(_need(cfg.path("graph", out), "knngraph"))
    B = cfg.num_blocks(g.n)
    eps = cfg["partition.eps"]
    if args.import_path:
        p = partitioner.load_partition(args.import_path, g.n, B, eps)
    else:
        p = partitioner.partition(g, B, eps, cfg["seed"])
    partitioner.save_partition(p, cfg.path("partition", out))
    if args.export_permuted:
        ds = _load_train(cfg, out)
        g2, ds2, _ = partitioner.permute(g, ds, p)
        knngraph.save_graph(g2, out / "graph_permuted.gcs")
        dataio.save_dataset(ds2, out / "train_permuted.gss", out / "train_permuted.gsl")
        np.savetxt(out / "permutation.txt", p.permutation, fmt="%d")
    sizes = p.block_sizes()
    _emit({"command": "partition", "blocks": B, "cut": partitioner.cut_weight(g, p),
           "total_weight": g.total_weight(), "min_block": int(sizes.min()), "max_block": int(sizes.max()),
           "capacity": p.capacity()})


def cmd_plan(cfg: RunConfig, out: Path, args):
    g = knngraph.load_graph(_need(cfg.path("graph", out), "knngraph"))
    B = cfg.num_blocks(g.n)
    p = partitioner.load_partition(_need(cfg.path("partition", out), "partitioner"), g.n, B,
                                   cfg["partition.eps"])
    plan = batching.make_plan(p, cfg["plan.block_size"], cfg["plan.blocks_per_meta"], cfg["seed"])
    batching.save_plan(plan, cfg.path("plan", out))
    full = cfg.path("full_labels", out)
    ds = _load_train(cfg, out, "full_labels" if full.exists() else "labels")
    report = batching.plan_diagnostics(g, ds, plan, random_seed=cfg["seed"])
    report.to_csv(out / "diagnostics.csv")
    _emit({"command": "plan", "meta_batches": plan.num_meta, **report.summary()})


def cmd_train(cfg: RunConfig, out: Path, args):
    ds = _load_train(cfg, out)
    g = knngraph.load_graph(_need(cfg.path("graph", out), "knngraph"))
    plan = batching.load_plan(_need(cfg.path("plan", out), "batching"))
    eval_path = cfg.path("eval_features", out)
    eval_ds = None
    if eval_path.exists():
        eval_ds = dataio.load_dataset(eval_path, _need(cfg.path("eval_labels", out), "dataio"))
    tcfg = cfg.train_config()
    init = model.init_model(cfg.layer_dims(ds.d, ds.num_classes), cfg["model.dropout"], cfg["seed"])
    trainer = engine.train_sequential if tcfg.workers == 1 else engine.train_parallel
    state, records = trainer(ds, g, plan, init, tcfg, eval_ds=eval_ds, metrics_csv=out / "metrics.csv",
                             checkpoint_dir=out / "checkpoints")
    if tcfg.epochs == 0:
        engine.MetricsWriter(out / "metrics.csv").close()
    model.save_checkpoint(state, cfg.path("checkpoint", out))
    with open(out / "throughput.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "workers", "samples_per_sec_per_worker"])
        for rec in records:
            if rec.samples_per_sec_per_worker == rec.samples_per_sec_per_worker:
                w.writerow([rec.epoch, rec.workers, repr(rec.samples_per_sec_per_worker)])
    final = records[-1].val_acc if records else float("nan")
    _emit({"command": "train", "epochs": tcfg.epochs, "updates": state.step, "val_acc": final})


def cmd_eval(cfg: RunConfig, out: Path, args):
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.path("checkpoint", out)
    state = model.load_checkpoint(_need(ckpt, "model"))
    ds = dataio.load_dataset(_need(cfg.path("eval_features", out), "dataio"),
                             _need(cfg.path("eval_labels", out), "dataio"))
    acc = engine.evaluate(state, ds)
    print(f"accuracy {acc:.6f}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate synthetic data and drop labels"),
    "build-graph": (cmd_build_graph, "build the kNN affinity graph"),
    "partition": (cmd_partition, "partition the graph (or import an assignment)"),
    "plan": (cmd_plan, "build meta-batches and write diagnostics"),
    "train": (cmd_train, "train sequentially or with synchronous workers"),
    "eval": (cmd_eval, "print accuracy of a checkpoint on the evaluation set"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", default="run", help="run directory (default: ./run)")
        if name == "partition":
            p.add_argument("--import", dest="import_path", help="read block ids from this file instead")
            p.add_argument("--export-permuted", action="store_true",
                           help="also write the block-ordered graph and dataset")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint to evaluate (default: paths.checkpoint)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg, out = _resolve(args)
        func(cfg, out, args)
    except GraphSSLError as exc:
        print(exc.one_line(), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except (ValueError, OSError) as exc:
        err = GraphSSLError(str(exc), args.command)
        print(err.one_line().replace("kind=GraphSSLError", f"kind={type(exc).__name__}"), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
