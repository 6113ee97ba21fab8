"""Meta-batch plans built from partition blocks, pairing schedules, and diagnostics.

A meta-batch is ``m`` randomly grouped partition blocks (mini-blocks). Each
training iteration regularizes one meta-batch together with a randomly
chosen partner, so every epoch visits each meta-batch once as the primary.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import DataSet
from .errors import ConfigError, FormatError
from .knngraph import AffinityGraph
from .partitioner import Partitioning

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaBatchPlan:
    """Fixed grouping of mini-blocks into meta-batches.

    Attributes:
        block_size: Nominal nodes per mini-block ``b``.
        blocks_per_meta: Mini-blocks per meta-batch ``m``.
        meta_batches: Mini-block ids of each meta-batch, in order.
        blocks: Node indices of every mini-block.
        seed: Seed used for the grouping.
    """

    block_size: int
    blocks_per_meta: int
    meta_batches: tuple[tuple[int, ...], ...]
    blocks: tuple[np.ndarray, ...]
    seed: int = 0

    @property
    def num_meta(self) -> int:
        return len(self.meta_batches)

    @property
    def ragged_last(self) -> bool:
        """True when the last meta-batch has fewer than ``m`` blocks."""
        return bool(self.meta_batches) and len(self.meta_batches[-1]) < self.blocks_per_meta

    def meta_nodes(self, j: int) -> np.ndarray:
        return np.concatenate([self.blocks[b] for b in self.meta_batches[j]])

    def concat_nodes(self, r: int, s: int | None) -> np.ndarray:
        """Nodes of the concatenated batch ``[M_r, M_s]`` (just ``M_r`` when ``s`` is None)."""
        if s is None:
            return self.meta_nodes(r)
        return np.concatenate([self.meta_nodes(r), self.meta_nodes(s)])


def num_blocks_for(n: int, block_size: int) -> int:
    """Partition count that yields mini-blocks of about ``block_size`` nodes."""
    return max(1, math.ceil(n / block_size))


def make_plan(p: Partitioning, block_size: int, blocks_per_meta: int, seed: int) -> MetaBatchPlan:
    """Shuffle the partition blocks and group them ``blocks_per_meta`` at a time."""
    if blocks_per_meta < 1:
        raise ConfigError(f"blocks_per_meta must be >= 1, got {blocks_per_meta}", "batching")
    if blocks_per_meta > p.num_blocks:
        raise ConfigError(
            f"blocks_per_meta={blocks_per_meta} exceeds the {p.num_blocks} available blocks", "batching"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(p.num_blocks).tolist()
    metas = tuple(tuple(order[i : i + blocks_per_meta]) for i in range(0, len(order), blocks_per_meta))
    plan = MetaBatchPlan(block_size, blocks_per_meta, metas, tuple(p.blocks()), seed)
    if plan.ragged_last:
        logger.info("last meta-batch has %d of %d blocks", len(metas[-1]), blocks_per_meta)
    return plan


def pair_schedule(plan: MetaBatchPlan, epoch_seed: int) -> list[tuple[int, int | None]]:
    """One ``(r, s)`` per meta-batch: ``r`` in shuffled order, ``s != r`` drawn uniformly.

    With a single meta-batch there is nothing to pair with and ``s`` is None.
    """
    rng = np.random.default_rng(epoch_seed)
    k = plan.num_meta
    if k < 2:
        logger.warning("single meta-batch: scheduling self-only regularization")
        return [(0, None)] if k == 1 else []
    schedule = []
    for r in rng.permutation(k).tolist():
        s = int(rng.integers(k - 1))
        schedule.append((r, s + (s >= r)))
    return schedule


def connectivity(g: AffinityGraph, batch) -> float:
    """Fraction of batch members' neighbors that lie inside the batch.

    Isolated nodes drop out of both sums; an all-isolated batch scores 0.
    """
    nodes = np.unique(np.asarray(batch, dtype=np.int64))
    inside = np.zeros(g.n, dtype=bool)
    inside[nodes] = True
    starts, ends = g.row_ptr[nodes], g.row_ptr[nodes + 1]
    total = int((ends - starts).sum())
    if total == 0:
        return 0.0
    cols = np.concatenate([g.col_idx[a:b] for a, b in zip(starts, ends)])
    return float(inside[cols].sum() / total)


def label_entropy(ds: DataSet, batch) -> float:
    """Shannon entropy (nats) of the label histogram over labeled batch members; 0 if none."""
    labels = ds.labels[np.asarray(batch, dtype=np.int64)]
    labels = labels[labels >= 0]
    if labels.size == 0:
        return 0.0
    counts = np.bincount(labels, minlength=ds.num_classes)
    q = counts[counts > 0] / labels.size
    return float(-(q * np.log(q)).sum())


@dataclass
class DiagnosticsReport:
    block_size: np.ndarray
    block_connectivity: np.ndarray
    block_entropy: np.ndarray
    meta_size: np.ndarray
    meta_connectivity: np.ndarray
    meta_entropy: np.ndarray
    global_entropy: float
    random_size: np.ndarray | None = None
    random_connectivity: np.ndarray | None = None
    random_entropy: np.ndarray | None = None

    def summary(self) -> dict[str, float]:
        out = {"global_entropy": self.global_entropy}
        for kind in ("block", "meta", "random"):
            conn = getattr(self, f"{kind}_connectivity")
            ent = getattr(self, f"{kind}_entropy")
            if conn is None:
                continue
            out[f"{kind}_connectivity_mean"] = float(conn.mean())
            out[f"{kind}_connectivity_var"] = float(conn.var())
            out[f"{kind}_entropy_mean"] = float(ent.mean())
            out[f"{kind}_entropy_var"] = float(ent.var())
        return out

    def rows(self):
        for kind in ("block", "meta", "random"):
            conn = getattr(self, f"{kind}_connectivity")
            if conn is None:
                continue
            sizes = getattr(self, f"{kind}_size")
            ent = getattr(self, f"{kind}_entropy")
            for i in range(conn.size):
                yield kind, i, int(sizes[i]), float(conn[i]), float(ent[i])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "index", "size", "connectivity", "entropy"])
            for kind, i, size, conn, ent in self.rows():
                w.writerow([kind, i, size, repr(conn), repr(ent)])


def random_batches(n: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Shuffled contiguous batches of ``batch_size`` (last one may be smaller)."""
    order = np.random.default_rng(seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def plan_diagnostics(g: AffinityGraph, ds: DataSet, plan: MetaBatchPlan, random_seed: int | None = None) -> DiagnosticsReport:
    """Connectivity and label entropy for every mini-block and meta-batch.

    When ``random_seed`` is given, size-matched random batches are scored as a baseline.
    """
    blocks = plan.blocks
    metas = [plan.meta_nodes(j) for j in range(plan.num_meta)]

    def score(batches):
        sizes = np.array([b.size for b in batches])
        conn = np.array([connectivity(g, b) for b in batches])
        ent = np.array([label_entropy(ds, b) for b in batches])
        return sizes, conn, ent

    bs, bc, be = score(blocks)
    ms, mc, me = score(metas)
    report = DiagnosticsReport(bs, bc, be, ms, mc, me, label_entropy(ds, np.arange(ds.n)))
    if random_seed is not None:
        size = max(1, int(round(np.mean([b.size for b in blocks]))))
        report.random_size, report.random_connectivity, report.random_entropy = score(
            random_batches(ds.n, size, random_seed)
        )
    return report


def save_plan(plan: MetaBatchPlan, path):
    """Text plan: header line, then ``meta <j>: <block ids>`` and ``block <b>: <node ids>`` lines."""
    with open(path, "w") as fh:
        fh.write(f"plan block_size={plan.block_size} blocks_per_meta={plan.blocks_per_meta} seed={plan.seed}\n")
        for j, meta in enumerate(plan.meta_batches):
            fh.write(f"meta {j}: {' '.join(map(str, meta))}\n")
        for b, nodes in enumerate(plan.blocks):
            fh.write(f"block {b}: {' '.join(map(str, nodes.tolist()))}\n")


def load_plan(path) -> MetaBatchPlan:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("plan "):
        raise FormatError(f"{path}: missing 'plan' header", "batching")
    try:
        header = dict(kv.split("=") for kv in lines[0].split()[1:])
        metas, blocks = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            tag, _, rest = line.partition(":")
            kind, idx = tag.split()
            values = tuple(int(v) for v in rest.split())
            if kind == "meta":
                if int(idx) != len(metas):
                    raise ValueError(f"line {lineno}: meta index out of order")
                metas.append(values)
            elif kind == "block":
                if int(idx) != len(blocks):
                    raise ValueError(f"line {lineno}: block index out of order")
                blocks.append(np.asarray(values, dtype=np.int64))
            else:
                raise ValueError(f"line {lineno}: unknown record {kind!r}")
        return MetaBatchPlan(int(header["block_size"]), int(header["blocks_per_meta"]), tuple(metas),
                             tuple(blocks), int(header["seed"]))
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: {exc}", "batching") from None
