"""Symmetric kNN affinity graph with RBF edge weights, stored in CSR form."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dataio import DataSet
from .errors import ConfigError, FormatError, IntegrityError

GRAPH_MAGIC = b"GCS1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

# extra candidates re-ranked with exact distances before tie-breaking
_CANDIDATE_SLACK = 8
_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class AffinityGraph:
    """Undirected weighted graph in compressed-row form.

    Weights are stored as float32 so the on-disk round trip is exact.
    ``degree_sums[i]`` caches the row sum of weights.
    """

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    weights: np.ndarray
    degree_sums: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", np.ascontiguousarray(self.row_ptr, dtype=np.int64))
        object.__setattr__(self, "col_idx", np.ascontiguousarray(self.col_idx, dtype=np.int64))
        object.__setattr__(self, "weights", np.ascontiguousarray(self.weights, dtype=np.float32))
        for a in (self.row_ptr, self.col_idx, self.weights):
            a.flags.writeable = False
        rows = np.repeat(np.arange(self.n), np.diff(self.row_ptr))
        deg = np.bincount(rows, weights=self.weights.astype(np.float64), minlength=self.n)
        deg.flags.writeable = False
        object.__setattr__(self, "degree_sums", deg)

    @property
    def nnz(self) -> int:
        return int(self.col_idx.size)

    @property
    def degrees(self) -> np.ndarray:
        """Neighbor counts ``|N_i|``."""
        return np.diff(self.row_ptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[i] : self.row_ptr[i + 1]]

    @cached_property
    def csr(self) -> sp.csr_matrix:
        """Cached float64 scipy view; treat as read-only."""
        return self.to_scipy(np.float64)

    def to_scipy(self, dtype=np.float64) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.weights.astype(dtype), self.col_idx, self.row_ptr), shape=(self.n, self.n)
        )

    @classmethod
    def from_scipy(cls, mat, validate: bool = True) -> "AffinityGraph":
        m = sp.csr_matrix(mat)
        m.sum_duplicates()
        m.sort_indices()
        g = cls(m.shape[0], m.indptr, m.indices, m.data.astype(np.float32))
        if validate:
            g.validate()
        return g

    def total_weight(self) -> float:
        """Sum of weights over unordered edges."""
        return float(self.weights.astype(np.float64).sum() / 2.0)

    def validate(self):
        """Raise FormatError / IntegrityError if any graph invariant fails."""
        n, rp, ci, w = self.n, self.row_ptr, self.col_idx, self.weights
        if rp.shape != (n + 1,) or rp[0] != 0:
            raise FormatError(f"row_ptr must have n+1={n + 1} entries starting at 0", "knngraph")
        if rp[-1] != ci.size or w.size != ci.size:
            raise FormatError(f"row_ptr[n]={rp[-1]} does not equal nnz={ci.size}", "knngraph")
        if np.any(np.diff(rp) < 0):
            raise FormatError("row_ptr is not nondecreasing", "knngraph")
        if ci.size == 0:
            return
        if ci.min() < 0 or ci.max() >= n:
            raise IntegrityError("column index out of range", "knngraph")
        rows = np.repeat(np.arange(n), np.diff(rp))
        self_loop = np.flatnonzero(rows == ci)
        if self_loop.size:
            i = int(rows[self_loop[0]])
            raise IntegrityError(f"self-loop on node {i}", "knngraph")
        same_row = rows[1:] == rows[:-1]
        unsorted = np.flatnonzero(same_row & (ci[1:] <= ci[:-1]))
        if unsorted.size:
            k = unsorted[0] + 1
            raise IntegrityError(f"row {rows[k]} columns not strictly ascending at column {ci[k]}", "knngraph")
        if not (np.all(w > 0) and np.all(w <= 1)):
            k = int(np.flatnonzero(~((w > 0) & (w <= 1)))[0])
            raise IntegrityError(f"weight {w[k]} of edge ({rows[k]}, {ci[k]}) outside (0, 1]", "knngraph")
        # symmetry: the transpose, sorted the same way, must match entry for entry
        order = np.lexsort((rows, ci))
        t_rows, t_cols, t_w = ci[order], rows[order], w[order]
        mismatch = np.flatnonzero((t_rows != rows) | (t_cols != ci) | (t_w != w))
        if mismatch.size:
            k = int(mismatch[0])
            i, j = int(rows[k]), int(ci[k])
            raise IntegrityError(f"asymmetric edge ({i}, {j}): weight or reverse edge differs", "knngraph")

    def equals(self, other: "AffinityGraph") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.weights, other.weights)
        )

    def __eq__(self, other):
        if not isinstance(other, AffinityGraph):
            return NotImplemented
        return self.equals(other)

    __hash__ = None


@dataclass(frozen=True)
class GraphConfig:
    k_nn: int = 10
    sigma: float | str = "median"
    distance_exponent: int = 1

    def validate(self):
        if self.k_nn < 1:
            raise ConfigError(f"k_nn must be >= 1, got {self.k_nn}", "knngraph")
        if self.distance_exponent not in (1, 2):
            raise ConfigError("distance_exponent must be 1 or 2", "knngraph")
        if isinstance(self.sigma, str):
            if self.sigma != "median":
                raise ConfigError(f"sigma must be a positive number or 'median', got {self.sigma!r}", "knngraph")
        elif not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}", "knngraph")


def knn_search(features: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``k`` nearest neighbors of every point, excluding itself.

    Ties in distance go to the lower index. Returns ``(indices, distances)``,
    each of shape ``(n, k)``, ordered nearest first.
    """
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if n <= k:
        raise ConfigError(f"need n > k_nn, got n={n}, k_nn={k}", "knngraph")
    sq = np.einsum("ij,ij->i", X, X)
    cand = min(k + _CANDIDATE_SLACK, n - 1)
    out_idx = np.empty((n, k), dtype=np.int64)
    out_dist = np.empty((n, k))
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * X[lo:hi] @ X.T
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        if cand < n - 1:
            part = np.argpartition(d2, cand - 1, axis=1)[:, :cand]
        else:
            part = np.tile(np.arange(n), (hi - lo, 1))
        for r in range(hi - lo):
            i = lo + r
            idx = part[r]
            idx = idx[idx != i]
            exact = np.sqrt(((X[idx] - X[i]) ** 2).sum(axis=1))
            order = np.lexsort((idx, exact))[:k]
            out_idx[i] = idx[order]
            out_dist[i] = exact[order]
    return out_idx, out_dist


def median_sigma(ds: DataSet, k_nn: int) -> float:
    """Median Euclidean distance over all (node, kNN neighbor) pairs.

    Falls back to the smallest positive kNN distance when the median is 0.
    """
    _, dist = knn_search(ds.features, k_nn)
    return _median_from_distances(dist)


def _median_from_distances(dist: np.ndarray) -> float:
    med = float(np.median(dist))
    if med > 0:
        return med
    pos = dist[dist > 0]
    if pos.size == 0:
        raise ConfigError("all kNN distances are zero (degenerate data)", "knngraph")
    return float(pos.min())


def rbf_weight(distance, sigma: float, exponent: int = 1):
    """``exp(-distance**exponent / (2 sigma^2))``."""
    return np.exp(-np.power(distance, exponent) / (2.0 * sigma * sigma))


def build_knn(ds: DataSet, cfg: GraphConfig) -> AffinityGraph:
    """kNN graph, symmetrized by union, with RBF weights on distances."""
    cfg.validate()
    if ds.n <= cfg.k_nn:
        raise ConfigError(f"need n > k_nn, got n={ds.n}, k_nn={cfg.k_nn}", "knngraph")
    idx, dist = knn_search(ds.features, cfg.k_nn)
    sigma = _median_from_distances(dist) if cfg.sigma == "median" else float(cfg.sigma)
    rows = np.repeat(np.arange(ds.n), cfg.k_nn)
    cols = idx.ravel()
    # union of directed edges; a weight depends only on distance so both
    # directions carry the same value and the max just deduplicates
    w = rbf_weight(dist.ravel(), sigma, cfg.distance_exponent)
    w = np.maximum(w, np.finfo(np.float32).tiny)
    directed = sp.coo_matrix((w, (rows, cols)), shape=(ds.n, ds.n)).tocsr()
    sym = directed.maximum(directed.T).tocsr()
    sym.sort_indices()
    return AffinityGraph(ds.n, sym.indptr, sym.indices, sym.data.astype(np.float32))


# --------------------------------------------------------------------------- IO


def save_graph(g: AffinityGraph, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(GRAPH_MAGIC, FORMAT_VERSION, g.n, g.nnz))
        fh.write(g.row_ptr.astype("<u8").tobytes())
        fh.write(g.col_idx.astype("<u8").tobytes())
        fh.write(g.weights.astype("<f4").tobytes())


def load_graph(path) -> AffinityGraph:
    """Load a graph file (binary, or ``i j w`` edge list for ``.txt``/``.edges``)."""
    if str(path).endswith((".txt", ".edges")):
        return load_edge_list(path)
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != GRAPH_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte 0, expected 'GCS1'", "knngraph")
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", "knngraph")
    _, version, n, nnz = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4", "knngraph")
    off = _HEADER.size
    need = off + 8 * (n + 1) + 8 * nnz + 4 * nnz
    if len(buf) != need:
        raise FormatError(f"{path}: size {len(buf)} bytes, header implies {need}", "knngraph")
    row_ptr = np.frombuffer(buf, "<u8", n + 1, off).astype(np.int64)
    off += 8 * (n + 1)
    col_idx = np.frombuffer(buf, "<u8", nnz, off).astype(np.int64)
    off += 8 * nnz
    weights = np.frombuffer(buf, "<f4", nnz, off).astype(np.float32)
    if row_ptr[-1] != nnz:
        raise FormatError(f"{path}: row_ptr[n]={row_ptr[-1]} does not equal nnz={nnz}", "knngraph")
    if np.any(np.diff(row_ptr) < 0):
        raise FormatError(f"{path}: row_ptr is not nondecreasing", "knngraph")
    g = AffinityGraph(int(n), row_ptr, col_idx, weights)
    g.validate()
    return g


def save_edge_list(g: AffinityGraph, path):
    rows = np.repeat(np.arange(g.n), g.degrees)
    keep = rows < g.col_idx
    with open(path, "w") as fh:
        fh.write(f"# n={g.n}\n")
        for i, j, w in zip(rows[keep], g.col_idx[keep], g.weights[keep]):
            fh.write(f"{i} {j} {float(w)!r}\n")


def load_edge_list(path, n: int | None = None) -> AffinityGraph:
    """Read ``i j w`` lines (``i < j``) as an undirected graph.

    A leading ``# n=<count>`` line fixes the node count; otherwise it is
    ``max index + 1`` (or ``n`` when given).
    """
    rows, cols, ws = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# n=") and n is None:
                    n = int(line[4:])
                continue
            parts = line.split()
            try:
                i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
            except (ValueError, IndexError):
                raise FormatError(f"{path}: line {lineno}: expected 'i j w'", "knngraph") from None
            if i == j:
                raise IntegrityError(f"{path}: line {lineno}: self-loop on node {i}", "knngraph")
            if i > j:
                raise FormatError(f"{path}: line {lineno}: expected i < j, got {i} {j}", "knngraph")
            rows.append(i)
            cols.append(j)
            ws.append(w)
    if n is None:
        n = max(max(rows, default=-1), max(cols, default=-1)) + 1
    rows, cols = np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)
    ws = np.asarray(ws, dtype=np.float32)
    mat = sp.coo_matrix(
        (np.concatenate([ws, ws]), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n, n),
    ).tocsr()
    if mat.nnz != 2 * rows.size:
        raise FormatError(f"{path}: duplicate edges", "knngraph")
    return AffinityGraph.from_scipy(mat)
