"""ReLU feed-forward classifier, graph-regularized semi-supervised loss, AdaGrad.

The loss over a batch ``M`` of nodes with predicted distributions ``p_i`` is,
per node,

    H^c(t_i, p_i)                                  (labeled i only)
  + gamma * sum_j w_ij H^c(p_i, p_j)               (j in M)
  - (kappa + gamma * sum_j w_ij) H(p_i)

averaged over ``|M|``, plus ``lambda * sum ||W||^2`` over weight matrices.
Gradients are derived by hand; see ``batch_gradient``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dataio import DataSet
from .errors import FormatError, IntegrityError, TrainingError
from .knngraph import AffinityGraph

CKPT_MAGIC = b"GMD1"
CKPT_VERSION = 1
ADAGRAD_DELTA = 1e-8
PROB_FLOOR = 1e-12
_LOG_FLOOR = float(np.log(PROB_FLOOR))


@dataclass
class ModelState:
    """Parameters, AdaGrad accumulators and step counter of the classifier.

    ``layer_dims`` is ``(d, h_1, ..., h_L, C)``; layer ``l`` maps
    ``layer_dims[l]`` to ``layer_dims[l + 1]``.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    acc_weights: list[np.ndarray]
    acc_biases: list[np.ndarray]
    dropout_p: float = 0.0
    step: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "ModelState":
        return ModelState(
            tuple(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [a.copy() for a in self.acc_weights],
            [a.copy() for a in self.acc_biases],
            self.dropout_p,
            self.step,
        )

    def param_names(self) -> list[str]:
        names = []
        for l in range(self.num_layers):
            names += [f"W{l}", f"b{l}"]
        return names

    def params(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def equals(self, other: "ModelState") -> bool:
        if tuple(self.layer_dims) != tuple(other.layer_dims) or self.dropout_p != other.dropout_p:
            return False
        if self.step != other.step:
            return False
        mine = self.params() + self.acc_weights + self.acc_biases
        theirs = other.params() + other.acc_weights + other.acc_biases
        return all(np.array_equal(a, b) for a, b in zip(mine, theirs))


def init_model(layer_dims, dropout_p: float = 0.0, seed: int = 0) -> ModelState:
    """He-normal weights (variance ``2 / fan_in``), zero biases, zero accumulators."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"bad layer dims {dims}")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError(f"dropout_p must be in [0, 1), got {dropout_p}")
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    return ModelState(
        dims,
        weights,
        biases,
        [np.zeros_like(w) for w in weights],
        [np.zeros_like(b) for b in biases],
        float(dropout_p),
    )


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.2
    kappa: float = 0.005
    lam: float = 1e-4

    def __post_init__(self):
        for name in ("gamma", "kappa", "lam"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class Gradient:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @staticmethod
    def average(grads: list["Gradient"]) -> "Gradient":
        """Mean over ``grads``, accumulated strictly in list order."""
        acc_w = [w.copy() for w in grads[0].weights]
        acc_b = [b.copy() for b in grads[0].biases]
        for g in grads[1:]:
            for a, w in zip(acc_w, g.weights):
                a += w
            for a, b in zip(acc_b, g.biases):
                a += b
        k = float(len(grads))
        return Gradient([a / k for a in acc_w], [a / k for a in acc_b])


@dataclass
class LossBreakdown:
    """Per-node averaged terms plus the L2 penalty.

    ``graph`` is the KL form ``gamma * sum w_ij KL(p_i || p_j) / |M|`` and
    ``ent`` is ``-kappa * sum H(p_i) / |M|``.
    """

    sup: float
    graph: float
    ent: float
    l2: float
    n: int
    extra: dict = field(default_factory=dict)

    @property
    def data(self) -> float:
        return self.sup + self.graph + self.ent

    @property
    def total(self) -> float:
        return self.data + self.l2

    def unnormalized(self) -> float:
        """Sum (not mean) of the data terms over the batch, without L2."""
        return self.data * self.n


# --------------------------------------------------------------------------- forward


def _check_input(state: ModelState, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.layer_dims[0]:
        raise ValueError(f"input shape {X.shape} does not match input dim {state.layer_dims[0]}")
    return X


def _dropout_masks(state: ModelState, batch: int, seed) -> list[np.ndarray | None]:
    p = state.dropout_p
    if p == 0.0 or seed is None:
        return [None] * (state.num_layers - 1)
    rng = np.random.default_rng(seed)
    keep = 1.0 - p
    return [(rng.random((batch, h)) >= p) / keep for h in state.layer_dims[1:-1]]


def _forward_cache(state: ModelState, X: np.ndarray, masks):
    hs, pre = [X], []
    h = X
    for l in range(state.num_layers - 1):
        a = h @ state.weights[l] + state.biases[l]
        pre.append(a)
        h = np.maximum(a, 0.0)
        if masks[l] is not None:
            h = h * masks[l]
        hs.append(h)
    z = h @ state.weights[-1] + state.biases[-1]
    return z, hs, pre


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(state: ModelState, X, train_mode: bool = False, dropout_seed=None) -> np.ndarray:
    """Class distributions for the rows of ``X``.

    In train mode hidden activations get inverted dropout with a mask drawn
    from ``dropout_seed``; eval mode uses no dropout and no rescaling.
    """
    X = _check_input(state, X)
    masks = _dropout_masks(state, X.shape[0], dropout_seed) if train_mode else [None] * (state.num_layers - 1)
    z, _, _ = _forward_cache(state, X, masks)
    return np.exp(log_softmax(z))


def predict(state: ModelState, X) -> np.ndarray:
    """Argmax class (lowest index on ties), eval mode."""
    return np.argmax(forward(state, X), axis=1)


# --------------------------------------------------------------------------- loss


def _batch_inputs(g: AffinityGraph, ds: DataSet, batch):
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 1 or batch.size == 0:
        raise IntegrityError("batch must be a nonempty 1-D index array", "model")
    if batch.min() < 0 or batch.max() >= g.n or g.n != ds.n:
        raise IntegrityError(f"batch node outside graph of {g.n} nodes", "model")
    W = g.csr[batch][:, batch].tocsr()
    return batch, W


def _terms(P, logP_raw, W, labels, cfg: LossConfig, want_grad: bool):
    """Unnormalized data terms and, optionally, their gradient w.r.t. the logits."""
    n, C = P.shape
    logP = np.maximum(logP_raw, _LOG_FLOOR)
    lab_rows = np.flatnonzero(labels >= 0)
    d = np.asarray(W.sum(axis=1)).ravel()
    H = -(P * logP).sum(axis=1)
    WlogP = W @ logP
    sup = -logP[lab_rows, labels[lab_rows]].sum()
    cross = -(P * WlogP).sum()
    graph = cfg.gamma * (cross - (d * H).sum())
    ent = -cfg.kappa * H.sum()
    if not want_grad:
        return sup, graph, ent, None
    coef = (cfg.gamma * d + cfg.kappa)[:, None]
    gP = -cfg.gamma * WlogP + coef * logP
    gL = -cfg.gamma * (W.T @ P) + coef * P
    gL[lab_rows, labels[lab_rows]] -= 1.0
    gL = np.where(logP_raw > _LOG_FLOOR, gL, 0.0)
    dz = P * (gP - (gP * P).sum(axis=1, keepdims=True)) + gL - P * gL.sum(axis=1, keepdims=True)
    return sup, graph, ent, dz


def l2_penalty(state: ModelState, lam: float) -> float:
    return lam * sum(float((w * w).sum()) for w in state.weights)


def batch_loss(state: ModelState, cfg: LossConfig, g: AffinityGraph, ds: DataSet, batch, P) -> tuple[float, LossBreakdown]:
    """Mean-per-node loss of ``batch`` given its predictions ``P``.

    Only edges with both endpoints in ``batch`` contribute.
    """
    batch, W = _batch_inputs(g, ds, batch)
    P = np.asarray(P, dtype=np.float64)
    if P.shape != (batch.size, ds.num_classes):
        raise ValueError(f"P shape {P.shape} does not match batch of {batch.size} and C={ds.num_classes}")
    with np.errstate(divide="ignore"):
        logP = np.log(P)
    sup, graph, ent, _ = _terms(P, logP, W, ds.labels[batch], cfg, want_grad=False)
    n = batch.size
    br = LossBreakdown(float(sup / n), float(graph / n), float(ent / n), l2_penalty(state, cfg.lam), n)
    return br.total, br


def batch_gradient(state: ModelState, cfg: LossConfig, g: AffinityGraph, ds: DataSet, batch,
                   dropout_seed=None) -> tuple[Gradient, LossBreakdown]:
    """Exact gradient of ``batch_loss`` with one shared (seeded) dropout mask.

    Returns the gradient and the loss breakdown of the same forward pass.
    """
    batch, W = _batch_inputs(g, ds, batch)
    X = _check_input(state, ds.features[batch])
    masks = _dropout_masks(state, X.shape[0], dropout_seed)
    z, hs, pre = _forward_cache(state, X, masks)
    logP = log_softmax(z)
    P = np.exp(logP)
    sup, graph, ent, dz = _terms(P, logP, W, ds.labels[batch], cfg, want_grad=True)
    n = batch.size
    dz /= n
    gw = [None] * state.num_layers
    gb = [None] * state.num_layers
    delta = dz
    for l in range(state.num_layers - 1, -1, -1):
        gw[l] = hs[l].T @ delta + 2.0 * cfg.lam * state.weights[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            dh = delta @ state.weights[l].T
            if masks[l - 1] is not None:
                dh = dh * masks[l - 1]
            delta = dh * (pre[l - 1] > 0)
    br = LossBreakdown(float(sup / n), float(graph / n), float(ent / n), l2_penalty(state, cfg.lam), n)
    return Gradient(gw, gb), br


# --------------------------------------------------------------------------- optimizer


def adagrad_step(state: ModelState, grad: Gradient, lr: float) -> ModelState:
    """In-place AdaGrad update; the whole step is rejected if any gradient is non-finite."""
    names = state.param_names()
    for name, arr, ref in zip(names, grad.arrays(), state.params()):
        if arr.shape != ref.shape:
            raise ValueError(f"gradient for {name} has shape {arr.shape}, expected {ref.shape}")
        if not np.all(np.isfinite(arr)):
            raise TrainingError(f"non-finite gradient in {name}", state, module="model")
    for l in range(state.num_layers):
        for p, acc, gr in ((state.weights[l], state.acc_weights[l], grad.weights[l]),
                           (state.biases[l], state.acc_biases[l], grad.biases[l])):
            acc += gr * gr
            p -= lr * gr / np.sqrt(acc + ADAGRAD_DELTA)
    state.step += 1
    return state


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(state: ModelState, path):
    """``GMD1`` | version u32 | L u32 | dims u64*L | dropout f64 | step u64 | per layer W, b, accW, accB f64."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(state.layer_dims)))
        fh.write(np.asarray(state.layer_dims, dtype="<u8").tobytes())
        fh.write(struct.pack("<dQ", state.dropout_p, state.step))
        for l in range(state.num_layers):
            for arr in (state.weights[l], state.biases[l], state.acc_weights[l], state.acc_biases[l]):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    buf = open(path, "rb").read()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte 0, expected 'GMD1'", "model")
    try:
        _, version, L = struct.unpack_from("<4sII", buf, 0)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported version {version} at byte 4", "model")
        off = 12
        dims = tuple(int(v) for v in np.frombuffer(buf, "<u8", L, off))
        off += 8 * L
        dropout_p, step = struct.unpack_from("<dQ", buf, off)
        off += 16
        arrays = []
        for a, b in zip(dims[:-1], dims[1:]):
            for shape in ((a, b), (b,), (a, b), (b,)):
                count = int(np.prod(shape))
                arrays.append(np.frombuffer(buf, "<f8", count, off).reshape(shape).astype(np.float64))
                off += 8 * count
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})", "model") from None
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes at byte {off}", "model")
    return ModelState(dims, arrays[0::4], arrays[1::4], arrays[2::4], arrays[3::4], dropout_p, step)
