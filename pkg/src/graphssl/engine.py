"""Sequential and barrier-synchronized data-parallel training loops.

One iteration takes a meta-batch ``M_r`` and its scheduled partner ``M_s``,
computes the gradient of the loss over ``[M_r, M_s]`` and applies AdaGrad.
With ``k`` workers, ``k`` consecutive schedule entries form a
super-iteration: each worker computes its gradient against the same frozen
parameters, the gradients are averaged in worker order, and one update is
applied.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .batching import MetaBatchPlan, pair_schedule
from .dataio import DataSet
from .errors import ConfigError, TrainingError
from .knngraph import AffinityGraph
from .model import (
    Gradient,
    LossBreakdown,
    LossConfig,
    ModelState,
    adagrad_step,
    batch_gradient,
    predict,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "iter", "wall_ms", "loss", "loss_sup", "loss_graph", "loss_ent", "loss_l2",
                  "val_acc", "lr", "workers"]

# tags keep the derived random streams independent of each other
_TAG_PAIRING = 1
_TAG_DROPOUT = 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.001
    workers: int = 1
    lr_reset_epoch: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    block_size: int = 128
    blocks_per_meta: int = 8
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}", "engine")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}", "engine")
        if self.lr_reset_epoch < 1:
            raise ConfigError(f"lr_reset_epoch must be >= 1, got {self.lr_reset_epoch}", "engine")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}", "engine")


@dataclass
class MetricsRecord:
    epoch: int
    iteration: int
    wall_ms: float
    loss: float
    loss_sup: float
    loss_graph: float
    loss_ent: float
    loss_l2: float
    val_acc: float
    lr: float
    workers: int
    samples_per_sec_per_worker: float = float("nan")

    def csv_row(self) -> list:
        return [self.epoch, self.iteration, f"{self.wall_ms:.3f}", repr(self.loss), repr(self.loss_sup),
                repr(self.loss_graph), repr(self.loss_ent), repr(self.loss_l2), repr(self.val_acc),
                repr(self.lr), self.workers]


def epoch_seed(seed: int, epoch: int) -> tuple[int, ...]:
    return (seed, _TAG_PAIRING, epoch)


def dropout_seed(seed: int, epoch: int, position: int) -> tuple[int, ...]:
    """Mask seed for the ``position``-th schedule entry of ``epoch``; independent of worker count."""
    return (seed, _TAG_DROPOUT, epoch, position)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """``base_lr * workers`` before ``lr_reset_epoch``, ``base_lr`` from then on."""
    return cfg.base_lr * cfg.workers if epoch < cfg.lr_reset_epoch else cfg.base_lr


def evaluate(model: ModelState, ds_eval: DataSet) -> float:
    """Argmax accuracy over the labeled points of ``ds_eval``."""
    mask = ds_eval.label_mask
    if not mask.any():
        raise ConfigError("evaluation set has no labeled points", "engine")
    pred = predict(model, ds_eval.features[mask])
    return float(np.mean(pred == ds_eval.labels[mask]))


class MetricsWriter:
    """Appends records to a CSV with the fixed header; flushes on demand."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(METRICS_HEADER)

    def write(self, rec: MetricsRecord):
        self._w.writerow(rec.csv_row())

    def flush(self):
        self._fh.flush()

    def close(self):
        self._fh.close()


def write_checkpoint(state: ModelState, directory, epoch: int):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = f"ckpt_epoch_{epoch}.gmd1"
    save_checkpoint(state, directory / name)
    (directory / "latest").write_text(name + "\n")


def _check_plan(ds: DataSet, g: AffinityGraph, plan: MetaBatchPlan):
    if ds.n != g.n:
        raise ConfigError(f"dataset has {ds.n} points but graph has {g.n} nodes", "engine")
    covered = np.concatenate(plan.blocks) if plan.blocks else np.array([], dtype=np.int64)
    if covered.size and (covered.min() < 0 or covered.max() >= g.n):
        raise ConfigError("plan references nodes outside the graph", "engine")


def _mean_breakdown(brs: list[LossBreakdown]) -> tuple[float, float, float, float]:
    k = len(brs)
    return (sum(b.sup for b in brs) / k, sum(b.graph for b in brs) / k,
            sum(b.ent for b in brs) / k, sum(b.l2 for b in brs) / k)


def _run(ds, g, plan, model, cfg, eval_ds, workers, metrics_csv, checkpoint_dir, on_record, parallel):
    _check_plan(ds, g, plan)
    if cfg.epochs == 0:
        return model, []
    if parallel and workers > plan.num_meta:
        raise ConfigError(f"workers={workers} exceeds {plan.num_meta} meta-batches", "engine")
    state = model.copy()
    records: list[MetricsRecord] = []
    writer = MetricsWriter(metrics_csv) if metrics_csv is not None else None
    pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="worker") if parallel else None
    start = time.perf_counter()
    last_wall = -1.0
    updates = 0
    window: list[LossBreakdown] = []

    def emit(epoch, lr, sps):
        nonlocal last_wall
        wall = max((time.perf_counter() - start) * 1e3, last_wall + 1e-3)
        last_wall = wall
        sup, graph, ent, l2 = _mean_breakdown(window) if window else (math.nan,) * 4
        val = evaluate(state, eval_ds) if eval_ds is not None else math.nan
        rec = MetricsRecord(epoch, updates, wall, sup + graph + ent + l2, sup, graph, ent, l2, val, lr,
                            workers, sps)
        records.append(rec)
        window.clear()
        if writer is not None:
            writer.write(rec)
        if on_record is not None:
            on_record(rec, state)

    def grad_job(replica, position, r, s, epoch):
        nodes = plan.concat_nodes(r, s)
        grad, br = batch_gradient(replica, cfg.loss, g, ds, nodes, dropout_seed(cfg.seed, epoch, position))
        return grad, br, nodes.size

    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(cfg, epoch)
            schedule = pair_schedule(plan, epoch_seed(cfg.seed, epoch))
            epoch_start = time.perf_counter()
            samples = 0
            for lo in range(0, len(schedule), workers):
                chunk = schedule[lo : lo + workers]
                if parallel:
                    # fork: every worker reads its own replica of the frozen parameters
                    futures = [pool.submit(grad_job, state.copy(), lo + w, r, s, epoch)
                               for w, (r, s) in enumerate(chunk)]
                    try:
                        results = [f.result() for f in futures]  # barrier
                    except TrainingError:
                        raise
                    except Exception as exc:
                        raise TrainingError(f"worker failed: {exc!r}", state) from exc
                    grad = Gradient.average([res[0] for res in results])
                else:
                    results = [grad_job(state, lo, *chunk[0], epoch)]
                    grad = results[0][0]
                brs = [res[1] for res in results]
                samples += sum(res[2] for res in results)
                if not all(math.isfinite(b.total) for b in brs):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, update {updates}", state)
                good = state.copy()
                try:
                    adagrad_step(state, grad, lr)
                except TrainingError as exc:
                    raise TrainingError(str(exc), good) from exc
                updates += 1
                window.extend(brs)
                if cfg.eval_every and updates % cfg.eval_every == 0:
                    emit(epoch, lr, math.nan)
            elapsed = time.perf_counter() - epoch_start
            sps = samples / workers / elapsed if elapsed > 0 else math.nan
            emit(epoch, lr, sps)
            if writer is not None:
                writer.flush()
            if checkpoint_dir is not None:
                write_checkpoint(state, checkpoint_dir, epoch)
    except TrainingError as exc:
        if checkpoint_dir is not None and exc.state is not None:
            write_checkpoint(exc.state, checkpoint_dir, -1)
        raise
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
        if writer is not None:
            writer.close()
    return state, records


def train_sequential(ds: DataSet, g: AffinityGraph, plan: MetaBatchPlan, model: ModelState, cfg: TrainConfig,
                     eval_ds: DataSet | None = None, metrics_csv=None, checkpoint_dir=None, on_record=None):
    """Plain loop: one AdaGrad step per ``(M_r, M_s)`` pair.

    The input model is not modified. Returns ``(state, records)``.
    """
    return _run(ds, g, plan, model, cfg, eval_ds, 1, metrics_csv, checkpoint_dir, on_record, parallel=False)


def train_parallel(ds: DataSet, g: AffinityGraph, plan: MetaBatchPlan, model: ModelState, cfg: TrainConfig,
                   eval_ds: DataSet | None = None, metrics_csv=None, checkpoint_dir=None, on_record=None):
    """Synchronous data parallelism over ``cfg.workers`` threads.

    Gradients are averaged in worker-index order so the run is bitwise
    reproducible; ``workers=1`` reproduces ``train_sequential`` exactly.
    """
    return _run(ds, g, plan, model, cfg, eval_ds, cfg.workers, metrics_csv, checkpoint_dir, on_record,
                parallel=True)


def super_iteration_gradient(state: ModelState, ds: DataSet, g: AffinityGraph, plan: MetaBatchPlan,
                             cfg: TrainConfig, pairs, epoch: int = 0, first_position: int = 0) -> Gradient:
    """Averaged gradient the parallel trainer would apply for ``pairs`` (computed serially)."""
    grads = []
    for w, (r, s) in enumerate(pairs):
        grad, _ = batch_gradient(state, cfg.loss, g, ds, plan.concat_nodes(r, s),
                                 dropout_seed(cfg.seed, epoch, first_position + w))
        grads.append(grad)
    return Gradient.average(grads)
