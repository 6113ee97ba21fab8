"""Run configuration: ``key = value`` files with dotted section prefixes.

Every key has a default (see ``DEFAULTS``). Unknown keys are rejected.
``#`` starts a comment. Example::

    seed = 3
    graph.k_nn = 10
    graph.sigma = median      # or a positive number
    model.hidden = 256,256
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .batching import num_blocks_for
from .dataio import SyntheticSpec
from .engine import TrainConfig
from .errors import ConfigError
from .knngraph import GraphConfig
from .model import LossConfig


def _sigma(text: str):
    if text.strip() == "median":
        return "median"
    return float(text)


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (default, parser, description)
DEFAULTS: dict[str, tuple] = {
    "seed": (0, int, "global seed; every other stream is derived from it"),
    "data.n": (10000, int, "training points"),
    "data.eval_n": (2000, int, "held-out evaluation points"),
    "data.d": (20, int, "feature dimension"),
    "data.classes": (10, int, "class count C"),
    "data.clusters_per_class": (1, int, "synthetic clusters per class"),
    "data.noise_sigma": (0.05, float, "isotropic noise scale of the synthetic data"),
    "data.label_ratio": (0.05, float, "fraction of training labels kept, per class"),
    "graph.k_nn": (10, int, "neighbors per node before symmetrization"),
    "graph.sigma": ("median", _sigma, "RBF bandwidth or 'median'"),
    "graph.distance_exponent": (1, int, "1 = exp(-|x-y|/2s^2), 2 = exp(-|x-y|^2/2s^2)"),
    "partition.num_blocks": (0, int, "partition count B; 0 derives ceil(n / plan.block_size)"),
    "partition.eps": (0.05, float, "block size tolerance"),
    "plan.block_size": (128, int, "nodes per mini-block b"),
    "plan.blocks_per_meta": (8, int, "mini-blocks per meta-batch m"),
    "loss.gamma": (0.2, float, "graph regularizer weight"),
    "loss.kappa": (0.005, float, "entropy regularizer weight"),
    "loss.lambda": (1e-4, float, "squared L2 weight on weight matrices"),
    "model.hidden": ((256, 256), _int_list, "hidden layer widths"),
    "model.dropout": (0.2, float, "dropout probability on hidden activations"),
    "train.epochs": (30, int, "epochs"),
    "train.base_lr": (0.001, float, "base learning rate"),
    "train.workers": (1, int, "synchronous workers k; 1 runs the sequential trainer"),
    "train.lr_reset_epoch": (10, int, "epoch at which lr drops from base_lr*k to base_lr"),
    "train.eval_every": (0, int, "extra metrics record every N updates (0: epoch ends only)"),
    "paths.features": ("train.gss", str, "training features"),
    "paths.labels": ("train.gsl", str, "training labels after label dropping"),
    "paths.full_labels": ("train_full.gsl", str, "all training labels (diagnostics only)"),
    "paths.eval_features": ("eval.gss", str, "evaluation features"),
    "paths.eval_labels": ("eval.gsl", str, "evaluation labels"),
    "paths.graph": ("graph.gcs", str, "affinity graph"),
    "paths.partition": ("partition.txt", str, "block id per node"),
    "paths.plan": ("plan.txt", str, "meta-batch plan"),
    "paths.checkpoint": ("model.gmd1", str, "final model"),
}


@dataclass
class RunConfig:
    """Resolved configuration; ``values`` holds every key in ``DEFAULTS``."""

    values: dict = field(default_factory=lambda: {k: v[0] for k, v in DEFAULTS.items()})

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, text: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}", "cli")
        parser = DEFAULTS[key][1]
        try:
            self.values[key] = parser(text.strip())
        except ValueError:
            raise ConfigError(f"bad value for {key}: {text.strip()!r}", "cli") from None

    def dumps(self) -> str:
        lines = ["# resolved run configuration"]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"

    def path(self, key: str, run_dir) -> Path:
        p = Path(self.values[f"paths.{key}"])
        return p if p.is_absolute() else Path(run_dir) / p

    # typed views for the library API

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            self["data.n"] + self["data.eval_n"], self["data.d"], self["data.classes"],
            self["data.clusters_per_class"], self["data.noise_sigma"], self["seed"],
        )

    def graph_config(self) -> GraphConfig:
        cfg = GraphConfig(self["graph.k_nn"], self["graph.sigma"], self["graph.distance_exponent"])
        cfg.validate()
        return cfg

    def num_blocks(self, n: int) -> int:
        return self["partition.num_blocks"] or num_blocks_for(n, self["plan.block_size"])

    def loss_config(self) -> LossConfig:
        try:
            return LossConfig(self["loss.gamma"], self["loss.kappa"], self["loss.lambda"])
        except ValueError as exc:
            raise ConfigError(str(exc), "cli") from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"], base_lr=self["train.base_lr"], workers=self["train.workers"],
            lr_reset_epoch=self["train.lr_reset_epoch"], loss=self.loss_config(),
            block_size=self["plan.block_size"], blocks_per_meta=self["plan.blocks_per_meta"],
            seed=self["seed"], eval_every=self["train.eval_every"],
        )

    def layer_dims(self, d: int, C: int) -> tuple[int, ...]:
        return (d, *self["model.hidden"], C)


def parse_config(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = RunConfig(dict(base.values)) if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", "cli")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}", "cli") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "cli") from None
    return parse_config(text, source=str(path))


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key=value`` strings in order."""
    out = RunConfig(dict(cfg.values))
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value", "cli")
        out.set(key.strip(), value)
    return out


def bundled_config_path(name: str = "demo.cfg") -> Path:
    return Path(__file__).parent / "configs" / name
