"""Balanced k-way edge-cut partitioning and block-diagonal reordering.

The partitioner is multilevel recursive bisection: every bisection coarsens
its subgraph by heavy-edge matching, grows an initial cut on the coarsest
graph, then projects back level by level with rebalancing and greedy
boundary refinement. A final k-way boundary pass runs on the full graph.
All moves respect the block capacity ``ceil((1 + eps) n / B)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dataio import DataSet
from .errors import ConfigError, FormatError, IntegrityError
from .knngraph import AffinityGraph

MIN_COARSE_NODES = 200
MAX_REFINE_PASSES = 8
INITIAL_TRIALS = 6
# coarsening stops when a level shrinks the graph by less than this fraction
_MIN_SHRINK = 0.05


@dataclass(frozen=True, eq=False)
class Partitioning:
    """Node-to-block assignment and the permutation that groups blocks.

    ``permutation[k]`` is the original index of the node placed at position
    ``k``; block ``b`` occupies positions ``block_bounds[b]:block_bounds[b+1]``.
    """

    num_blocks: int
    assignment: np.ndarray
    permutation: np.ndarray
    block_bounds: np.ndarray
    balance_eps: float = 0.05

    @property
    def n(self) -> int:
        return int(self.assignment.size)

    @classmethod
    def from_assignment(cls, assignment, num_blocks: int, balance_eps: float = 0.05) -> "Partitioning":
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.size and (assignment.min() < 0 or assignment.max() >= num_blocks):
            raise IntegrityError("block id outside [0, num_blocks)", "partitioner")
        perm = np.argsort(assignment, kind="stable")
        counts = np.bincount(assignment, minlength=num_blocks)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        return cls(num_blocks, assignment, perm, bounds, balance_eps)

    def blocks(self) -> list[np.ndarray]:
        """Original node indices of each block, in permutation order."""
        return [self.permutation[self.block_bounds[b] : self.block_bounds[b + 1]] for b in range(self.num_blocks)]

    def block_sizes(self) -> np.ndarray:
        return np.diff(self.block_bounds)

    def capacity(self) -> int:
        return block_capacity(self.n, self.num_blocks, self.balance_eps)

    def is_balanced(self) -> bool:
        return int(self.block_sizes().max(initial=0)) <= self.capacity()

    def validate(self):
        n = self.n
        if sorted(self.permutation.tolist()) != list(range(n)):
            raise IntegrityError("permutation is not a bijection on [0, n)", "partitioner")
        if self.block_bounds[0] != 0 or self.block_bounds[-1] != n or np.any(np.diff(self.block_bounds) < 0):
            raise IntegrityError("block_bounds malformed", "partitioner")
        for b in range(self.num_blocks):
            members = self.permutation[self.block_bounds[b] : self.block_bounds[b + 1]]
            if np.any(self.assignment[members] != b):
                raise IntegrityError(f"block {b} range holds nodes of another block", "partitioner")


def block_capacity(n: int, num_blocks: int, eps: float) -> int:
    # the small epsilon guards ceil against float noise when n/B*(1+eps) is integral
    return int(math.ceil((1.0 + eps) * n / num_blocks - 1e-9))


def _adjacency(g: AffinityGraph) -> sp.csr_matrix:
    return g.to_scipy(np.float64)


def cut_weight(g: AffinityGraph, p: Partitioning) -> float:
    """Total weight of unordered edges whose endpoints lie in different blocks."""
    if p.n != g.n:
        raise IntegrityError(f"partition covers {p.n} nodes, graph has {g.n}", "partitioner")
    return _cut_of_assignment(_adjacency(g), p.assignment)


def _cut_of_assignment(adj: sp.csr_matrix, assignment: np.ndarray) -> float:
    coo = adj.tocoo()
    crossing = assignment[coo.row] != assignment[coo.col]
    return float(coo.data[crossing].sum() / 2.0)


# --------------------------------------------------------------------------- coarsening


def _heavy_edge_matching(adj: sp.csr_matrix, vw: np.ndarray, rng, max_vw: int) -> np.ndarray:
    """Return ``cmap`` mapping each node to its coarse node id."""
    n = adj.shape[0]
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    match = np.full(n, -1, dtype=np.int64)
    for u in rng.permutation(n):
        if match[u] >= 0:
            continue
        lo, hi = indptr[u], indptr[u + 1]
        nbrs = indices[lo:hi]
        if nbrs.size:
            ok = (match[nbrs] < 0) & (vw[nbrs] + vw[u] <= max_vw)
            if ok.any():
                cand, w = nbrs[ok], data[lo:hi][ok]
                best = cand[w == w.max()].min()
                match[u], match[best] = best, u
                continue
        match[u] = u
    leader = np.minimum(np.arange(n), match)
    _, cmap = np.unique(leader, return_inverse=True)
    return cmap


def _contract(adj: sp.csr_matrix, vw: np.ndarray, cmap: np.ndarray):
    nc = int(cmap.max()) + 1
    P = sp.csr_matrix((np.ones(cmap.size), (np.arange(cmap.size), cmap)), shape=(cmap.size, nc))
    coarse = (P.T @ adj @ P).tocsr()
    coarse.setdiag(0)
    coarse.eliminate_zeros()
    coarse.sort_indices()
    return coarse, np.bincount(cmap, weights=vw, minlength=nc).astype(np.int64)


def _coarsen(adj, vw, rng, coarsen_to: int):
    """Return ``(graphs, cmaps)``: ``graphs[0]`` is the input, ``cmaps[i]`` maps level i onto i+1."""
    max_vw = max(2, int(math.ceil(1.5 * vw.sum() / coarsen_to)))
    graphs, cmaps = [(adj, vw)], []
    while adj.shape[0] > coarsen_to:
        cmap = _heavy_edge_matching(adj, vw, rng, max_vw)
        if int(cmap.max()) + 1 > (1.0 - _MIN_SHRINK) * adj.shape[0]:
            break
        adj, vw = _contract(adj, vw, cmap)
        graphs.append((adj, vw))
        cmaps.append(cmap)
    return graphs, cmaps


# --------------------------------------------------------------------------- bisection


def _side_weights(vw, side):
    left = int(vw[side == 0].sum())
    return left, int(vw.sum()) - left


def _gains(adj, side) -> np.ndarray:
    """Cut reduction from moving each node to the other side."""
    other = adj @ (side == 1).astype(np.float64)
    total = np.asarray(adj.sum(axis=1)).ravel()
    same = np.where(side == 1, other, total - other)
    return (total - same) - same


def _grow_bisection(adj, vw, target, lo, hi, rng) -> np.ndarray:
    """Greedy graph growing: add the max-gain frontier node until the region reaches ``target``."""
    n = adj.shape[0]
    side = np.ones(n, dtype=np.int8)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    conn = np.zeros(n)
    weight = 0
    in_region = np.zeros(n, dtype=bool)
    start = int(rng.integers(n))
    while weight < target:
        free = ~in_region & (weight + vw <= hi)
        if not free.any():
            break
        frontier = free & (conn > 0)
        pool = frontier if frontier.any() else free
        if weight == 0:
            v = start if free[start] else int(np.flatnonzero(free)[0])
        else:
            score = np.where(pool, 2.0 * conn - deg, -np.inf)
            v = int(np.flatnonzero(score == score.max())[0])
        # stop early if adding v would overshoot the target by more than stopping short
        if weight >= lo and abs(weight + vw[v] - target) > abs(weight - target):
            break
        in_region[v] = True
        side[v] = 0
        weight += int(vw[v])
        row = slice(adj.indptr[v], adj.indptr[v + 1])
        conn[adj.indices[row]] += adj.data[row]
    return side


def _rebalance(adj, vw, side, lo, hi):
    """Move max-gain nodes off the heavy side until the left weight is in ``[lo, hi]``."""
    left, _ = _side_weights(vw, side)
    while not lo <= left <= hi:
        src = 0 if left > hi else 1
        excess = left - lo if src == 0 else hi - left
        movable = (side == src) & (vw <= max(excess, 0))
        if not movable.any():
            break
        gains = np.where(movable, _gains(adj, side), -np.inf)
        v = int(np.flatnonzero(gains == gains.max())[0])
        side[v] = 1 - src
        left += -int(vw[v]) if src == 0 else int(vw[v])
    return side


def _refine_pass(adj, vw, side, lo, hi) -> int:
    """One greedy pass: move nodes with positive gain while the balance permits."""
    gains = _gains(adj, side)
    left, _ = _side_weights(vw, side)
    order = np.flatnonzero(gains > 0)
    order = order[np.lexsort((order, -gains[order]))]
    moves = 0
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    for v in order:
        row = slice(indptr[v], indptr[v + 1])
        nb_side = side[indices[row]]
        w = data[row]
        same = w[nb_side == side[v]].sum()
        gain = w.sum() - 2.0 * same
        if gain <= 0:
            continue
        new_left = left - vw[v] if side[v] == 0 else left + vw[v]
        cur_ok = lo <= left <= hi
        if cur_ok and not lo <= new_left <= hi:
            continue
        if not cur_ok and abs(new_left - np.clip(new_left, lo, hi)) > abs(left - np.clip(left, lo, hi)):
            continue
        side[v] = 1 - side[v]
        left = int(new_left)
        moves += 1
    return moves


def _swap_pass(adj, vw, side) -> int:
    """Pairwise swaps of equal-weight nodes with positive combined gain (small graphs only)."""
    dense = adj.toarray()
    swaps = 0
    while True:
        gains = _gains(adj, side)
        left_nodes = np.flatnonzero(side == 0)
        right_nodes = np.flatnonzero(side == 1)
        if not left_nodes.size or not right_nodes.size:
            return swaps
        pair_gain = gains[left_nodes, None] + gains[None, right_nodes] - 2.0 * dense[np.ix_(left_nodes, right_nodes)]
        pair_gain[vw[left_nodes, None] != vw[None, right_nodes]] = -np.inf
        best = pair_gain.max()
        if not best > 1e-12:
            return swaps
        a, b = np.argwhere(pair_gain == best)[0]
        side[left_nodes[a]], side[right_nodes[b]] = 1, 0
        swaps += 1


def _refine(adj, vw, side, lo, hi, trace, level):
    cut = _cut_of_assignment(adj, side)
    for pass_no in range(MAX_REFINE_PASSES):
        moved = _refine_pass(adj, vw, side, lo, hi)
        new_cut = _cut_of_assignment(adj, side)
        if trace is not None:
            left, right = _side_weights(vw, side)
            trace.append(dict(stage="bisect", level=level, pass_no=pass_no, cut_before=cut,
                              cut_after=new_cut, left=left, lo=lo, hi=hi, unit=bool(np.all(vw == 1))))
        cut = new_cut
        if not moved:
            break
    return side


def _multilevel_bisect(adj, target, lo, hi, rng, coarsen_to, trace=None) -> np.ndarray:
    graphs, cmaps = _coarsen(adj, np.ones(adj.shape[0], dtype=np.int64), rng, coarsen_to)
    cadj, cvw = graphs[-1]
    best, best_key = None, None
    small = cadj.shape[0] <= MIN_COARSE_NODES
    for _ in range(INITIAL_TRIALS):
        side = _grow_bisection(cadj, cvw, target, lo, hi, rng)
        side = _rebalance(cadj, cvw, side, lo, hi)
        side = _refine(cadj, cvw, side, lo, hi, None, len(cmaps))
        if small:
            _swap_pass(cadj, cvw, side)
        left, _ = _side_weights(cvw, side)
        violation = max(lo - left, left - hi, 0)
        key = (violation, _cut_of_assignment(cadj, side))
        if best_key is None or key < best_key:
            best, best_key = side.copy(), key
    side = best
    for depth in range(len(cmaps) - 1, -1, -1):
        side = side[cmaps[depth]]
        a, w = graphs[depth]
        side = _rebalance(a, w, side, lo, hi)
        side = _refine(a, w, side, lo, hi, trace, depth)
    if not cmaps:
        side = _refine(adj, cvw, side, lo, hi, trace, 0)
    return side


def _recursive_bisect(adj, nodes, nblocks, first, assignment, cap, level_eps, rng, trace):
    if nblocks == 1:
        assignment[nodes] = first
        return
    s = nodes.size
    n_left = nblocks // 2
    n_right = nblocks - n_left
    target = s * n_left / nblocks
    lo_feas = max(s - n_right * cap, n_left)
    hi_feas = min(n_left * cap, s - n_right)
    lo = max(lo_feas, int(math.ceil(target * (1 - level_eps))))
    hi = min(hi_feas, int(math.floor(target * (1 + level_eps))))
    if lo > hi:
        lo, hi = lo_feas, hi_feas
    sub = adj[nodes][:, nodes].tocsr()
    coarsen_to = max(4 * nblocks, MIN_COARSE_NODES)
    side = _multilevel_bisect(sub, target, lo, hi, rng, coarsen_to, trace)
    left = nodes[side == 0]
    right = nodes[side == 1]
    if not (lo_feas <= left.size <= hi_feas):
        raise IntegrityError(f"bisection left {left.size} nodes outside feasible [{lo_feas}, {hi_feas}]", "partitioner")
    _recursive_bisect(adj, left, n_left, first, assignment, cap, level_eps, rng, trace)
    _recursive_bisect(adj, right, n_right, first + n_left, assignment, cap, level_eps, rng, trace)


def refine_kway(adj: sp.csr_matrix, assignment: np.ndarray, num_blocks: int, cap: int,
                max_passes: int = MAX_REFINE_PASSES, trace=None) -> np.ndarray:
    """Greedy k-way boundary refinement; each move strictly lowers the cut and keeps sizes <= ``cap``."""
    sizes = np.bincount(assignment, minlength=num_blocks)
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    cut = _cut_of_assignment(adj, assignment)
    for pass_no in range(max_passes):
        coo_rows = np.repeat(np.arange(adj.shape[0]), np.diff(indptr))
        boundary = np.unique(coo_rows[assignment[coo_rows] != assignment[indices]])
        moves = 0
        for v in boundary:
            row = slice(indptr[v], indptr[v + 1])
            conn = np.bincount(assignment[indices[row]], weights=data[row], minlength=num_blocks)
            own = assignment[v]
            gain = conn - conn[own]
            gain[own] = -np.inf
            gain[sizes + 1 > cap] = -np.inf
            b = int(np.argmax(gain))
            if gain[b] > 0 and sizes[own] > 1:
                assignment[v] = b
                sizes[own] -= 1
                sizes[b] += 1
                moves += 1
        new_cut = _cut_of_assignment(adj, assignment)
        if trace is not None:
            trace.append(dict(stage="kway", level=0, pass_no=pass_no, cut_before=cut, cut_after=new_cut,
                              max_block=int(sizes.max()), cap=cap, unit=True))
        cut = new_cut
        if not moves:
            break
    return assignment


def partition(g: AffinityGraph, B: int, eps: float = 0.05, seed: int = 0, trace: list | None = None) -> Partitioning:
    """Split ``g`` into ``B`` blocks of at most ``ceil((1+eps) n / B)`` nodes with low edge cut.

    Deterministic in ``seed``. When ``trace`` is a list, one dict per
    refinement pass is appended (cut before/after and balance).
    """
    if B < 2:
        raise ConfigError(f"B must be >= 2, got {B}", "partitioner")
    if B > g.n:
        raise ConfigError(f"B={B} exceeds node count {g.n}", "partitioner")
    if eps < 0:
        raise ConfigError(f"eps must be >= 0, got {eps}", "partitioner")
    rng = np.random.default_rng(seed)
    adj = _adjacency(g)
    cap = block_capacity(g.n, B, eps)
    depth = max(1, math.ceil(math.log2(B)))
    level_eps = (1.0 + eps) ** (1.0 / depth) - 1.0
    assignment = np.empty(g.n, dtype=np.int64)
    _recursive_bisect(adj, np.arange(g.n), B, 0, assignment, cap, level_eps, rng, trace)
    assignment = refine_kway(adj, assignment, B, cap, trace=trace)
    p = Partitioning.from_assignment(assignment, B, eps)
    if not p.is_balanced():
        raise IntegrityError(f"partition exceeds capacity {cap}", "partitioner")
    return p


def random_balanced_partition(n: int, B: int, seed: int, eps: float = 0.0) -> Partitioning:
    """Baseline: random assignment with block sizes balanced within one."""
    rng = np.random.default_rng(seed)
    assignment = np.arange(n) % B
    return Partitioning.from_assignment(rng.permutation(assignment), B, eps)


def permute(g: AffinityGraph, ds: DataSet, p: Partitioning):
    """Reindex graph and dataset so each block is contiguous.

    Returns ``(graph, dataset, partitioning)``; the new partitioning has the
    identity permutation.
    """
    if not (g.n == ds.n == p.n):
        raise IntegrityError(f"size mismatch: graph {g.n}, dataset {ds.n}, partition {p.n}", "partitioner")
    perm = p.permutation
    adj = _adjacency(g)[perm][:, perm]
    g2 = AffinityGraph.from_scipy(adj.astype(np.float32), validate=False)
    ds2 = ds.subset(perm)
    p2 = Partitioning(p.num_blocks, p.assignment[perm].copy(), np.arange(p.n), p.block_bounds.copy(), p.balance_eps)
    return g2, ds2, p2


def permute_graph(g: AffinityGraph, perm: np.ndarray) -> AffinityGraph:
    """Graph with node ``perm[k]`` relabeled ``k``."""
    adj = _adjacency(g)[perm][:, perm]
    return AffinityGraph.from_scipy(adj.astype(np.float32), validate=False)


def save_partition(p: Partitioning, path):
    Path(path).write_text("".join(f"{b}\n" for b in p.assignment.tolist()))


def load_partition(path, n: int, B: int, eps: float = 0.05) -> Partitioning:
    """Read one block id per line; the permutation is a stable sort on block id."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if len(lines) != n:
        raise FormatError(f"{path}: {len(lines)} block ids for {n} nodes", "partitioner")
    ids = np.empty(n, dtype=np.int64)
    for lineno, ln in enumerate(lines, start=1):
        try:
            b = int(ln)
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: not an integer: {ln!r}", "partitioner") from None
        if not 0 <= b < B:
            raise FormatError(f"{path}: line {lineno}: block id {b} outside [0, {B})", "partitioner")
        ids[lineno - 1] = b
    return Partitioning.from_assignment(ids, B, eps)
