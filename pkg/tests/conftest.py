import math

import numpy as np
import pytest
import scipy.sparse as sp

from graphssl.dataio import DataSet
from graphssl.knngraph import AffinityGraph

# criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[str, str]] = {}


def graph_from_edges(n, edges) -> AffinityGraph:
    """Symmetric graph from ``(i, j, w)`` triples (each undirected edge listed once)."""
    rows, cols, vals = [], [], []
    for i, j, w in edges:
        rows += [i, j]
        cols += [j, i]
        vals += [w, w]
    mat = sp.csr_matrix((np.asarray(vals, dtype=np.float32), (rows, cols)), shape=(n, n))
    return AffinityGraph.from_scipy(mat)


def random_graph(n, p, rng, groups=None) -> AffinityGraph:
    """Erdos-Renyi graph with weights in (0, 1]; with ``groups`` only within-group edges."""
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if groups is not None and groups[i] != groups[j]:
                continue
            if rng.random() < p:
                edges.append((i, j, float(rng.uniform(0.05, 1.0))))
    return graph_from_edges(n, edges)


def random_dataset(n, d, C, rng, labeled_frac=1.0) -> DataSet:
    X = rng.standard_normal((n, d))
    y = rng.integers(0, C, size=n)
    y[rng.random(n) >= labeled_frac] = -1
    return DataSet(X, y, C)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"criterion {name}: {status} {detail}")


def loss_at(state, cfg, g, ds, batch, dropout_seed=None):
    from graphssl.model import batch_loss, forward

    train = dropout_seed is not None
    P = forward(state, ds.features[batch], train_mode=train, dropout_seed=dropout_seed)
    return batch_loss(state, cfg, g, ds, batch, P)[0]


def finite_difference_error(state, cfg, g, ds, batch, dropout_seed=None, h=1e-5):
    """Max over parameters of |analytic - central difference| / max(|analytic|, |numeric|, 1e-8)."""
    from graphssl.model import batch_gradient

    grad, _ = batch_gradient(state, cfg, g, ds, batch, dropout_seed)
    worst = 0.0
    for param, analytic in zip(state.params(), grad.arrays()):
        flat = param.reshape(-1)
        numeric = np.empty(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_at(state, cfg, g, ds, batch, dropout_seed)
            flat[k] = orig - h
            down = loss_at(state, cfg, g, ds, batch, dropout_seed)
            flat[k] = orig
            numeric[k] = (up - down) / (2 * h)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst


def kl_objective(P, labels, W, C, gamma, kappa):
    """Direct sum of KL divergences: labeled KL(t||p) + gamma w_ij KL(p_i||p_j) + kappa KL(p_i||u)."""
    n = P.shape[0]
    total = 0.0
    for i in range(n):
        if labels[i] >= 0:
            total += -math.log(P[i, labels[i]])  # KL(onehot || p)
        for j in range(n):
            if W[i, j] > 0:
                total += gamma * W[i, j] * sum(P[i, c] * math.log(P[i, c] / P[j, c]) for c in range(C))
        total += kappa * sum(P[i, c] * math.log(P[i, c] * C) for c in range(C))
    return total
