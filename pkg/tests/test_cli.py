import csv
import hashlib
import subprocess
import sys

import pytest

from graphssl.cli import main
from graphssl.config import DEFAULTS, RunConfig, apply_overrides, bundled_config_path, load_config, parse_config
from graphssl.errors import ConfigError

DEMO = str(bundled_config_path("demo.cfg"))
STAGES = ["gen-data", "build-graph", "partition", "plan"]


def digests(run_dir):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in run_dir.iterdir() if p.is_file()}


def run(*args):
    return main(list(args))


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    for stage in STAGES:
        assert run(stage, "--config", DEMO, "--out", str(out)) == 0
    return out


def test_config_defaults_documented():
    for key, (default, parser, doc) in DEFAULTS.items():
        assert doc and callable(parser)
    cfg = RunConfig()
    assert cfg["graph.k_nn"] == 10 and cfg["model.hidden"] == (256, 256)


def test_config_round_trip():
    cfg = load_config(DEMO)
    cfg = apply_overrides(cfg, ["graph.sigma=0.5", "model.hidden=32", "seed=9"])
    again = parse_config(cfg.dumps())
    assert again.values == cfg.values


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("graph.nope = 3\n")
    with pytest.raises(ConfigError, match="run.cfg:2"):
        parse_config("seed = 1\ngraph.k_nn = ten\n", source="run.cfg")
    with pytest.raises(ConfigError):
        parse_config("just text\n")
    assert parse_config("# comment only\n\nseed = 4  # trailing\n")["seed"] == 4


def test_pipeline_outputs(demo_run):
    for name in ("run.cfg", "train.gss", "train.gsl", "eval.gss", "graph.gcs", "partition.txt", "plan.txt",
                 "diagnostics.csv"):
        assert (demo_run / name).exists(), name
    echoed = load_config(demo_run / "run.cfg")
    assert echoed.values == load_config(DEMO).values


def test_full_demo_train_and_eval(demo_run, capsys):
    before = digests(demo_run)
    assert run("train", "--config", DEMO, "--out", str(demo_run)) == 0
    after = digests(demo_run)
    assert all(after[name] == digest for name, digest in before.items() if name not in ("run.cfg", "metrics.csv"))
    rows = list(csv.reader(open(demo_run / "metrics.csv")))
    assert rows[0] == "epoch,iter,wall_ms,loss,loss_sup,loss_graph,loss_ent,loss_l2,val_acc,lr,workers".split(",")
    walls = [float(r[2]) for r in rows[1:]]
    assert len(walls) == 30 and all(b > a for a, b in zip(walls, walls[1:]))
    assert (demo_run / "checkpoints" / "latest").read_text().strip() == "ckpt_epoch_29.gmd1"
    capsys.readouterr()
    assert run("eval", "--config", DEMO, "--out", str(demo_run)) == 0
    acc = float(capsys.readouterr().out.split()[-1])
    assert acc > 0.9


def test_train_rerun_is_identical(demo_run, tmp_path):
    outs = []
    for name in ("a", "b"):
        target = tmp_path / name
        target.mkdir()
        for f in demo_run.iterdir():
            if f.is_file():
                (target / f.name).write_bytes(f.read_bytes())
        assert run("train", "--config", DEMO, "--out", str(target), "--set", "train.epochs=3") == 0
        rows = list(csv.reader(open(target / "metrics.csv")))
        outs.append(([r[:2] + r[3:] for r in rows], (target / "model.gmd1").read_bytes()))
    assert outs[0] == outs[1]


def test_eval_untrained_model_is_near_chance(demo_run, tmp_path, capsys):
    target = tmp_path / "untrained"
    target.mkdir()
    for f in demo_run.iterdir():
        if f.is_file():
            (target / f.name).write_bytes(f.read_bytes())
    for w in range(3):
        capsys.readouterr()
        assert run("train", "--config", DEMO, "--out", str(target), "--set", "train.epochs=0", "--seed", str(w)) == 0
        assert run("eval", "--config", DEMO, "--out", str(target)) == 0
        acc = float(capsys.readouterr().out.split()[-1])
        assert abs(acc - 0.1) < 0.1


def test_partition_import(demo_run, tmp_path):
    target = tmp_path / "imp"
    target.mkdir()
    for f in demo_run.iterdir():
        if f.is_file():
            (target / f.name).write_bytes(f.read_bytes())
    src = tmp_path / "external.txt"
    src.write_text((demo_run / "partition.txt").read_text())
    assert run("partition", "--config", DEMO, "--out", str(target), "--import", str(src)) == 0
    assert (target / "partition.txt").read_text() == src.read_text()


def test_errors_are_single_line(tmp_path, capsys):
    assert run("train", "--out", str(tmp_path / "empty")) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error module=dataio kind=FormatError")
    assert run("plan", "--out", str(tmp_path), "--set", "bogus=1") != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "module=cli" in err[0] and "bogus" in err[0]
    bad = tmp_path / "bad.txt"
    bad.write_text("7\n")
    (tmp_path / "g").mkdir()
    assert run("gen-data", "--out", str(tmp_path / "g"), "--set", "data.n=50", "--set", "data.eval_n=10",
               "--set", "data.d=3") == 0
    assert run("build-graph", "--out", str(tmp_path / "g"), "--set", "data.n=50") == 0
    capsys.readouterr()
    assert run("partition", "--out", str(tmp_path / "g"), "--import", str(bad)) != 0
    assert "module=partitioner" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "graphssl", "eval", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode != 0
    assert proc.stderr.startswith("error module=model")
