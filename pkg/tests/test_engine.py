import csv
import threading

import numpy as np
import pytest

from graphssl import engine
from graphssl.batching import make_plan, pair_schedule
from graphssl.dataio import DataSet, SyntheticSpec, drop_labels, generate_synthetic, split_dataset
from graphssl.engine import (
    METRICS_HEADER,
    TrainConfig,
    dropout_seed,
    epoch_seed,
    evaluate,
    lr_schedule,
    train_parallel,
    train_sequential,
)
from graphssl.errors import ConfigError, TrainingError
from graphssl.knngraph import GraphConfig, build_knn
from graphssl.model import ADAGRAD_DELTA, LossConfig, batch_gradient, init_model, load_checkpoint
from graphssl.partitioner import partition


@pytest.fixture(scope="module")
def setup():
    full = generate_synthetic(SyntheticSpec(n=700, d=6, C=3, seed=2))
    train, held = split_dataset(full, 100, seed=0)
    g = build_knn(train, GraphConfig(k_nn=5))
    plan = make_plan(partition(g, 12, seed=0), 50, 2, seed=0)
    return train, held, g, plan


def small_cfg(**kw):
    base = dict(epochs=2, base_lr=0.01, loss=LossConfig(0.2, 0.01, 1e-4), block_size=50, blocks_per_meta=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule_examples():
    assert lr_schedule(TrainConfig(workers=8), 0) == pytest.approx(0.008)
    assert lr_schedule(TrainConfig(workers=8), 10) == 0.001
    assert all(lr_schedule(TrainConfig(workers=1), e) == 0.001 for e in range(30))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(workers=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_reset_epoch=0)


def test_zero_epochs_returns_model(setup):
    train, _, g, plan = setup
    m = init_model((6, 8, 3), seed=0)
    out, records = train_sequential(train, g, plan, m, small_cfg(epochs=0))
    assert out.equals(m) and records == []


def test_supervised_reduction_loss_decreases(setup):
    train, held, g, plan = setup
    m = init_model((6, 16, 3), seed=0)
    cfg = small_cfg(epochs=5, loss=LossConfig(0.0, 0.0, 0.0))
    _, records = train_sequential(train, g, plan, m, cfg, eval_ds=held)
    losses = [r.loss for r in records]
    assert losses[-1] < losses[0]
    assert all(r.loss_graph == 0 and r.loss_ent == 0 for r in records)


def test_sequential_is_deterministic(setup, tmp_path):
    train, _, g, plan = setup
    lab = drop_labels(train, 0.1, seed=0)
    m = init_model((6, 8, 3), dropout_p=0.2, seed=0)
    a, _ = train_sequential(lab, g, plan, m, small_cfg(), checkpoint_dir=tmp_path / "a")
    b, _ = train_sequential(lab, g, plan, m, small_cfg(), checkpoint_dir=tmp_path / "b")
    assert a.equals(b)
    assert (tmp_path / "a" / "ckpt_epoch_1.gmd1").read_bytes() == (tmp_path / "b" / "ckpt_epoch_1.gmd1").read_bytes()
    assert (tmp_path / "a" / "latest").read_text().strip() == "ckpt_epoch_1.gmd1"
    assert load_checkpoint(tmp_path / "a" / "ckpt_epoch_1.gmd1").equals(a)
    # the input model is not modified
    assert m.step == 0


def test_parallel_single_worker_matches_sequential(setup):
    train, held, g, plan = setup
    lab = drop_labels(train, 0.1, seed=0)
    m = init_model((6, 8, 3), dropout_p=0.2, seed=0)
    a, ra = train_sequential(lab, g, plan, m, small_cfg(), eval_ds=held)
    b, rb = train_parallel(lab, g, plan, m, small_cfg(), eval_ds=held)
    assert a.equals(b)
    assert [r.csv_row()[3:] for r in ra] == [r.csv_row()[3:] for r in rb]


@pytest.mark.parametrize("k", [2, 3])
def test_parallel_super_iteration_matches_oracle(setup, k):
    train, _, g, _ = setup
    lab = drop_labels(train, 0.2, seed=1)
    plan = make_plan(partition(g, 2 * k, seed=1), 100, 2, seed=1)
    assert plan.num_meta == k
    m = init_model((6, 8, 3), dropout_p=0.2, seed=4)
    cfg = small_cfg(epochs=1, workers=k)
    out, _ = train_parallel(lab, g, plan, m, cfg)
    assert out.step == 1

    # oracle: serial gradients with the same dropout seeds, arithmetic mean, closed-form AdaGrad
    sched = pair_schedule(plan, epoch_seed(cfg.seed, 0))
    grads = [batch_gradient(m, cfg.loss, g, lab, plan.concat_nodes(r, s), dropout_seed(cfg.seed, 0, pos))[0]
             for pos, (r, s) in enumerate(sched)]
    lr = lr_schedule(cfg, 0)
    for i, param in enumerate(m.params()):
        mean = sum(gr.arrays()[i] for gr in grads) / k
        want = param - lr * mean / np.sqrt(mean * mean + ADAGRAD_DELTA)
        np.testing.assert_allclose(out.params()[i], want, rtol=1e-12, atol=1e-15)


def test_epoch_coverage(setup, monkeypatch):
    train, _, g, plan = setup
    seen = []
    real = engine.batch_gradient
    lock = threading.Lock()

    def spy(state, cfg, g_, ds, nodes, seed):
        with lock:
            seen.append(seed)
        return real(state, cfg, g_, ds, nodes, seed)

    monkeypatch.setattr(engine, "batch_gradient", spy)
    for k in (1, 2, 3):
        seen.clear()
        train_parallel(train, g, plan, init_model((6, 4, 3), seed=0), small_cfg(epochs=1, workers=k))
        positions = sorted(seed[3] for seed in seen)
        assert positions == list(range(plan.num_meta))


def test_workers_must_not_exceed_meta_batches(setup):
    train, _, g, plan = setup
    with pytest.raises(ConfigError):
        train_parallel(train, g, plan, init_model((6, 4, 3)), small_cfg(workers=plan.num_meta + 1))


def test_worker_failure_aborts_without_update(setup, monkeypatch):
    train, _, g, plan = setup
    calls = {"n": 0}
    real = engine.batch_gradient

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] == 3:
            raise RuntimeError("boom")
        return real(*args)

    monkeypatch.setattr(engine, "batch_gradient", flaky)
    m = init_model((6, 4, 3), seed=0)
    with pytest.raises(TrainingError) as info:
        train_parallel(train, g, plan, m, small_cfg(workers=2))
    # first super-iteration (calls 1-2) applied, the failing one was not
    assert info.value.state.step == 1


def test_non_finite_loss_aborts_with_checkpoint(setup, tmp_path):
    train, _, g, plan = setup
    m = init_model((6, 4, 3), seed=0)
    m.weights[0][0, 0] = np.nan
    with pytest.raises(TrainingError):
        train_sequential(train, g, plan, m, small_cfg(), checkpoint_dir=tmp_path)
    assert (tmp_path / "ckpt_epoch_-1.gmd1").exists()


def test_metrics_csv(setup, tmp_path):
    train, held, g, plan = setup
    path = tmp_path / "metrics.csv"
    _, records = train_sequential(train, g, plan, init_model((6, 4, 3), seed=0), small_cfg(epochs=3, eval_every=2),
                                  eval_ds=held, metrics_csv=path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == METRICS_HEADER
    assert len(rows) - 1 == len(records)
    walls = [float(r[2]) for r in rows[1:]]
    assert all(b > a for a, b in zip(walls, walls[1:]))
    assert {int(r[0]) for r in rows[1:]} == {0, 1, 2}
    assert all(0.0 <= float(r[8]) <= 1.0 for r in rows[1:])


def test_evaluate_examples():
    from graphssl.model import init_model as im

    m = im((2, 2), seed=0)
    m.weights[0][:] = [[1.0, -1.0], [0.0, 0.0]]
    X = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 5.0]])
    ds = DataSet(X, np.array([0, 1, 0]), 2)
    assert evaluate(m, ds) == 1.0
    with pytest.raises(ConfigError):
        evaluate(m, DataSet(X, np.full(3, -1), 2))


def test_evaluate_random_model_is_chance():
    rng = np.random.default_rng(0)
    ds = DataSet(rng.standard_normal((1000, 5)), np.repeat([0, 1], 500), 2)
    m = init_model((5, 2), seed=0)
    # labels are independent of the features, so any fixed model is a random guesser
    assert abs(evaluate(m, ds) - 0.5) <= 0.05
