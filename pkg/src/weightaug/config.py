"""Experiment configuration files.

Grammar: one ``key = value`` per line, keys are dotted (``section.name``),
``#`` starts a comment, blank lines are ignored, a key may appear once.
List values separate items with ``|``.  Recognised keys::

    architecture = smallcnn | vgg16c | custom
    model.layers = conv:32,3; relu; maxpool:2; flatten; linear:10   (custom only)
    dataset = cifar10 | cifar100 | mnist
    data.root = PATH              (default: $WAS_DATA_ROOT, else ./data)
    data.train_subset = N         (0 = full split)
    data.test_subset = N
    data.subset_seed = N
    train.batch_size, train.epochs, train.lr, train.momentum, train.seed,
    train.gradient = adjoint | straight_through
    dom.seed = N
    was.conv, was.linear, was.<layer name> = transform spec or preset
    eval.perturb = rotate:0,15 | translate:0.1,0.1
    eval.perturb_seed = N
    sweep.group = conv            (which was.* key each sweep spec replaces)
    sweep.was = crop:0.8,1.0 | -T
    sweep.perturb = rotate:0,15 | rotate:0,45
    sweep.max_cells = 64
    sweep.workers = 1
    out.checkpoint, out.log, out.csv, out.table = PATH
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .data import READERS, DataPerturbSpec
from .errors import ConfigError
from .models import ArchitectureDef, build
from .shadow import TrainConfig, resolve_specs
from .transforms import TransformSpec, parse_spec

DATA_ROOT_ENV = "WAS_DATA_ROOT"
IN_SHAPES = {"cifar10": (3, 32, 10), "cifar100": (3, 32, 100), "mnist": (1, 28, 10)}


@dataclass(frozen=True)
class ExperimentConfig:
    architecture: str = "smallcnn"
    layers: str = ""
    dataset: str = "cifar10"
    data_root: str = ""
    train_subset: int = 0
    test_subset: int = 0
    subset_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    was: dict[str, TransformSpec] = field(default_factory=dict)
    perturbs: tuple[DataPerturbSpec, ...] = ()
    perturb_seed: int = 0
    sweep_group: str = "conv"
    sweep_was: tuple[TransformSpec, ...] = ()
    sweep_perturbs: tuple[DataPerturbSpec, ...] = ()
    sweep_max_cells: int = 64
    sweep_workers: int = 1
    out_checkpoint: str = "model.wasw"
    out_log: str = ""
    out_csv: str = ""
    out_table: str = ""

    def arch(self) -> ArchitectureDef:
        c, hw, nc = IN_SHAPES[self.dataset]
        return build(self.architecture, c, hw, nc, self.layers)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, master_seed=seed))

    def with_was(self, group: str, spec: TransformSpec) -> "ExperimentConfig":
        was = dict(self.was)
        was[group] = spec
        return replace(self, was=was, train=replace(self.train, specs=was))

    @property
    def data_meta(self) -> dict:
        return {"dataset": self.dataset, "train_subset": self.train_subset,
                "test_subset": self.test_subset, "subset_seed": self.subset_seed}


def _int(key: str, lo: int = 0) -> Callable[[str], int]:
    def conv(v: str) -> int:
        try:
            n = int(v)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {v!r}") from None
        if n < lo:
            raise ConfigError(f"{key}: must be >= {lo}, got {n}")
        return n
    return conv


def _float(key: str) -> Callable[[str], float]:
    def conv(v: str) -> float:
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {v!r}") from None
    return conv


def _items(v: str) -> list[str]:
    return [p.strip() for p in v.split("|") if p.strip()]


def _spec(key: str) -> Callable[[str], TransformSpec]:
    def conv(v: str) -> TransformSpec:
        try:
            return parse_spec(v)
        except ConfigError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return conv


def _perturbs(key: str) -> Callable[[str], tuple[DataPerturbSpec, ...]]:
    def conv(v: str) -> tuple[DataPerturbSpec, ...]:
        try:
            return tuple(DataPerturbSpec.parse(p) for p in _items(v))
        except ConfigError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return conv


def parse_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key in raw:
            raise ConfigError(f"{key}: given twice (line {lineno})")
        raw[key] = value.strip()
    return raw


def from_mapping(raw: dict[str, str], env: dict[str, str] | None = None) -> ExperimentConfig:
    """Build and fully validate a config; raises ``ConfigError`` naming the field."""
    env = os.environ if env is None else env
    kw: dict = {}
    train_kw: dict = {}
    was: dict[str, TransformSpec] = {}
    simple = {
        "architecture": ("architecture", str),
        "model.layers": ("layers", str),
        "dataset": ("dataset", str),
        "data.root": ("data_root", str),
        "data.train_subset": ("train_subset", _int("data.train_subset")),
        "data.test_subset": ("test_subset", _int("data.test_subset")),
        "data.subset_seed": ("subset_seed", _int("data.subset_seed")),
        "eval.perturb": ("perturbs", _perturbs("eval.perturb")),
        "eval.perturb_seed": ("perturb_seed", _int("eval.perturb_seed")),
        "sweep.group": ("sweep_group", str),
        "sweep.was": ("sweep_was", lambda v: tuple(_spec("sweep.was")(p) for p in _items(v))),
        "sweep.perturb": ("sweep_perturbs", _perturbs("sweep.perturb")),
        "sweep.max_cells": ("sweep_max_cells", _int("sweep.max_cells", 1)),
        "sweep.workers": ("sweep_workers", _int("sweep.workers", 1)),
        "out.checkpoint": ("out_checkpoint", str),
        "out.log": ("out_log", str),
        "out.csv": ("out_csv", str),
        "out.table": ("out_table", str),
    }
    training = {
        "train.batch_size": ("batch_size", _int("train.batch_size", 1)),
        "train.epochs": ("epochs", _int("train.epochs", 1)),
        "train.lr": ("learning_rate", _float("train.lr")),
        "train.momentum": ("momentum", _float("train.momentum")),
        "train.seed": ("master_seed", _int("train.seed")),
        "train.gradient": ("gradient", str),
        "train.eval_batch_size": ("eval_batch_size", _int("train.eval_batch_size", 1)),
        "dom.seed": ("dom_seed", _int("dom.seed")),
    }
    for key, value in raw.items():
        if key in simple:
            name, conv = simple[key]
            kw[name] = conv(value)
        elif key in training:
            name, conv = training[key]
            train_kw[name] = conv(value)
        elif key.startswith("was.") and len(key) > 4:
            was[key[4:]] = _spec(key)(value)
        else:
            raise ConfigError(f"{key}: unknown key")

    cfg = ExperimentConfig(**kw)
    if cfg.dataset not in READERS:
        raise ConfigError(f"dataset: unknown id {cfg.dataset!r} ({', '.join(READERS)})")
    if not cfg.data_root:
        cfg = replace(cfg, data_root=env.get(DATA_ROOT_ENV, "data"))
    train_kw.update(architecture=cfg.architecture, dataset=cfg.dataset)
    cfg = replace(cfg, train=TrainConfig(**train_kw), was=was)
    try:
        arch = cfg.arch()
    except ConfigError as exc:
        raise ConfigError(f"architecture: {exc}") from None
    try:
        resolve_specs(arch, was)
    except ConfigError as exc:
        raise ConfigError(f"was: {exc}") from None
    names = {pl.name for pl in arch.param_layers()}
    if cfg.sweep_group not in names | {"conv", "linear"}:
        raise ConfigError(f"sweep.group: {cfg.sweep_group!r} is not 'conv', 'linear' or a layer name")
    return replace(cfg, train=replace(cfg.train, specs=was))


def load_config(path: str | os.PathLike, env: dict[str, str] | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {p} ({exc.strerror})") from None
    return from_mapping(parse_text(text), env)
