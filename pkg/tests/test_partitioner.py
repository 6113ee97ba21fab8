import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import graph_from_edges, random_dataset, random_graph
from graphssl.errors import ConfigError, FormatError, IntegrityError
from graphssl.partitioner import (
    Partitioning,
    block_capacity,
    cut_weight,
    load_partition,
    partition,
    permute,
    random_balanced_partition,
    save_partition,
)


def brute_cut(g, assignment):
    A = g.csr
    total = 0.0
    for i in range(g.n):
        for j in range(i + 1, g.n):
            if assignment[i] != assignment[j]:
                total += A[i, j]
    return total


def best_bisection(g):
    n = g.n
    best = math.inf
    for left in itertools.combinations(range(1, n), n // 2 - 1):
        a = np.ones(n, dtype=int)
        a[[0, *left]] = 0
        best = min(best, brute_cut(g, a))
    return best


def planted(seed, blocks=4, size=50, p_in=0.3, p_out=0.01):
    rng = np.random.default_rng(seed)
    truth = np.repeat(np.arange(blocks), size)
    edges = []
    n = blocks * size
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < (p_in if truth[i] == truth[j] else p_out):
                edges.append((i, j, float(rng.uniform(0.2, 1.0))))
    return graph_from_edges(n, edges), truth


def test_two_triangles():
    g = graph_from_edges(6, [(0, 1, 1), (1, 2, 1), (0, 2, 1), (3, 4, 1), (4, 5, 1), (3, 5, 1)])
    p = partition(g, 2, eps=0.0, seed=0)
    assert cut_weight(g, p) == 0.0
    assert len(set(p.assignment[:3])) == 1 and len(set(p.assignment[3:])) == 1


def test_path_of_four():
    g = graph_from_edges(4, [(0, 1, 1), (1, 2, 1), (2, 3, 1)])
    assert best_bisection(g) == 1.0
    p = partition(g, 2, eps=0.0, seed=0)
    assert cut_weight(g, p) == 1.0
    assert p.assignment[0] == p.assignment[1] != p.assignment[2] == p.assignment[3]


def test_cut_weight_examples():
    g = graph_from_edges(4, [(0, 1, 1), (1, 2, 1), (2, 3, 1)])
    assert cut_weight(g, Partitioning.from_assignment([0, 0, 1, 1], 2)) == 1.0
    assert cut_weight(g, Partitioning.from_assignment([0, 0, 0, 0], 1)) == 0.0
    assert cut_weight(g, Partitioning.from_assignment([0, 1, 2, 3], 4)) == pytest.approx(g.total_weight())
    with pytest.raises(IntegrityError):
        cut_weight(g, Partitioning.from_assignment([0, 1, 0], 2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(4, 40), B=st.integers(2, 6), p=st.floats(0.05, 0.5))
def test_cut_weight_matches_oracle(seed, n, B, p):
    rng = np.random.default_rng(seed)
    g = random_graph(n, p, rng)
    part = Partitioning.from_assignment(rng.integers(0, B, n), B)
    assert cut_weight(g, part) == pytest.approx(brute_cut(g, part.assignment), rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("seed", range(8))
def test_small_graph_within_twice_optimum(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(12, 0.35, rng)
    p = partition(g, 2, eps=0.0, seed=seed)
    assert p.block_sizes().tolist() == [6, 6]
    assert cut_weight(g, p) <= 2 * best_bisection(g) + 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_planted_partition_recovered(seed):
    g, truth = planted(seed)
    planted_cut = cut_weight(g, Partitioning.from_assignment(truth, 4))
    trace = []
    p = partition(g, 4, eps=0.05, seed=seed, trace=trace)
    assert cut_weight(g, p) <= planted_cut + 1e-9
    assert p.block_sizes().max() <= math.ceil(1.05 * 200 / 4)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(8, 120), B=st.integers(2, 9), eps=st.sampled_from([0.0, 0.05, 0.2]))
def test_partition_properties(seed, n, B, eps):
    B = min(B, n)
    rng = np.random.default_rng(seed)
    g = random_graph(n, min(1.0, 6 / n), rng)
    trace = []
    p = partition(g, B, eps=eps, seed=seed, trace=trace)
    p.validate()
    assert p.block_sizes().max() <= block_capacity(n, B, eps)
    assert sorted(p.permutation.tolist()) == list(range(n))
    for b in range(B):
        lo, hi = p.block_bounds[b], p.block_bounds[b + 1]
        assert np.all(p.assignment[p.permutation[lo:hi]] == b)
    for rec in trace:
        assert rec["cut_after"] <= rec["cut_before"] + 1e-9
        if rec["stage"] == "kway":
            assert rec["max_block"] <= rec["cap"]
        elif rec["unit"]:
            assert rec["lo"] <= rec["left"] <= rec["hi"]
    # deterministic in seed
    assert np.array_equal(partition(g, B, eps=eps, seed=seed).assignment, p.assignment)


def test_partition_beats_random_on_knn_graph():
    from graphssl.dataio import SyntheticSpec, generate_synthetic
    from graphssl.knngraph import GraphConfig, build_knn

    ds = generate_synthetic(SyntheticSpec(n=2000, d=10, C=5, seed=3))
    g = build_knn(ds, GraphConfig(k_nn=10))
    for seed in range(3):
        p = partition(g, 16, 0.05, seed)
        assert cut_weight(g, p) < cut_weight(g, random_balanced_partition(g.n, 16, seed))


def test_partition_errors():
    g = graph_from_edges(3, [(0, 1, 1.0)])
    with pytest.raises(ConfigError):
        partition(g, 4)
    with pytest.raises(ConfigError):
        partition(g, 1)
    with pytest.raises(ConfigError):
        partition(g, 2, eps=-0.1)


def test_permute_identity_and_inverse(rng):
    g = random_graph(30, 0.2, rng)
    ds = random_dataset(30, 3, 3, rng)
    ident = Partitioning(1, np.zeros(30, dtype=np.int64), np.arange(30), np.array([0, 30]))
    g2, ds2, _ = permute(g, ds, ident)
    assert g2.equals(g) and ds2.equals(ds)

    p = random_balanced_partition(30, 4, seed=2)
    g3, ds3, p3 = permute(g, ds, p)
    assert np.array_equal(p3.permutation, np.arange(30))
    inv = np.argsort(p.permutation)
    back = Partitioning(1, np.zeros(30, dtype=np.int64), inv, np.array([0, 30]))
    g4, ds4, _ = permute(g3, ds3, back)
    assert g4.equals(g) and ds4.equals(ds)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(4, 40), B=st.integers(2, 5))
def test_permute_preserves_edges_and_cut(seed, n, B):
    rng = np.random.default_rng(seed)
    g = random_graph(n, 0.3, rng)
    ds = random_dataset(n, 2, 3, rng, labeled_frac=0.5)
    p = random_balanced_partition(n, B, seed)
    g2, ds2, p2 = permute(g, ds, p)
    perm = p.permutation
    A, A2 = g.csr, g2.csr
    for new_i in range(n):
        for new_j in g2.neighbors(new_i):
            assert A2[new_i, new_j] == A[perm[new_i], perm[new_j]]
    assert g2.nnz == g.nnz
    assert np.array_equal(ds2.labels, ds.labels[perm])
    assert np.array_equal(ds2.features, ds.features[perm])
    assert cut_weight(g2, p2) == pytest.approx(cut_weight(g, p), rel=1e-12)
    g2.validate()


def test_load_partition(tmp_path):
    (tmp_path / "p.txt").write_text("0\n0\n1\n1\n")
    p = load_partition(tmp_path / "p.txt", 4, 2)
    assert p.block_bounds.tolist() == [0, 2, 4]
    (tmp_path / "bad.txt").write_text("0\n2\n1\n1\n")
    with pytest.raises(FormatError, match="line 2"):
        load_partition(tmp_path / "bad.txt", 4, 2)
    with pytest.raises(FormatError):
        load_partition(tmp_path / "p.txt", 5, 2)


def test_partition_round_trip(tmp_path, rng):
    g = random_graph(40, 0.2, rng)
    p = partition(g, 5, seed=1)
    save_partition(p, tmp_path / "p.txt")
    back = load_partition(tmp_path / "p.txt", 40, 5)
    assert np.array_equal(back.assignment, p.assignment)
    assert np.array_equal(back.permutation, p.permutation)
