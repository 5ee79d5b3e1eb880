"""Inference with switchable weight modes.

``aom`` serves the plain weights exactly as stored.  ``dom`` serves one
deterministic draw of the transform applied to the plain weights, keyed by
the DOM seed, and reports the sparsity and FLOPs that draw induces.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, UsageError
from .metrics import flops_model
from .models import ArchitectureDef, logits
from .rng import Purpose
from .transforms import TransformInstance, TransformSpec, apply, sample_keyed, sparsity_of

MODES = ("aom", "dom")


@dataclass(frozen=True)
class ModeConfig:
    mode: str = "aom"
    dom_seed: int | None = None
    dom_spec_override: TransformSpec | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be 'aom' or 'dom', got {self.mode!r}")
        if self.dom_seed is not None and self.dom_seed < 0:
            raise ConfigError("dom_seed: must be non-negative")


@dataclass(frozen=True)
class MaterializedModel:
    arch: ArchitectureDef
    mode: str
    weights: Mapping[str, np.ndarray]
    instances: Mapping[str, TransformInstance] = field(default_factory=dict)
    per_layer_sparsity: Mapping[str, Fraction] = field(default_factory=dict)

    @property
    def sparsity(self) -> float:
        """Whole-model fraction of weight entries zeroed by the transforms."""
        zeros = total = 0
        for pl in self.arch.param_layers():
            n = int(np.prod(pl.weight_shape))
            zeros += self.per_layer_sparsity.get(pl.name, Fraction(0)) * n
            total += n
        return float(Fraction(zeros) / total)

    def flops(self, flops_per_mac: int = 1) -> float:
        return flops_model(self.arch, None, {k: float(v) for k, v in self.per_layer_sparsity.items()},
                           flops_per_mac)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float32, copy=True)
    a.setflags(write=False)
    return a


def dom_instances(ckpt: Checkpoint, dom_seed: int, spec: TransformSpec | None = None) -> dict[str, TransformInstance]:
    out = {}
    for pl in ckpt.arch.param_layers():
        layer_spec = spec if spec is not None else ckpt.specs.get(pl.name, TransformSpec.identity())
        out[pl.name] = sample_keyed(layer_spec, pl.weight_shape, dom_seed, pl.layer_id, 0, Purpose.DOM)
    return out


def materialize(ckpt: Checkpoint, mode_config: ModeConfig) -> MaterializedModel:
    """Effective weights for ``mode_config``; a pure function of its inputs."""
    if mode_config.mode == "aom":
        return MaterializedModel(ckpt.arch, "aom", {k: _frozen(v) for k, v in ckpt.params.items()})
    seed = ckpt.dom_seed if mode_config.dom_seed is None else mode_config.dom_seed
    instances = dom_instances(ckpt, seed, mode_config.dom_spec_override)
    weights: dict[str, np.ndarray] = {}
    sparsity: dict[str, Fraction] = {}
    for pl in ckpt.arch.param_layers():
        inst = instances[pl.name]
        weights[f"{pl.name}.weight"] = _frozen(apply(inst, ckpt.params[f"{pl.name}.weight"]))
        weights[f"{pl.name}.bias"] = _frozen(ckpt.params[f"{pl.name}.bias"])
        sparsity[pl.name] = sparsity_of(inst, pl.weight_shape)
    return MaterializedModel(ckpt.arch, "dom", weights, instances, sparsity)


def predict(model: MaterializedModel, images: np.ndarray) -> np.ndarray:
    """Arg-max class per sample; ties go to the lowest class index."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or tuple(images.shape[1:]) != model.arch.input_shape:
        raise UsageError(f"predict: batch shape {images.shape} does not match input {model.arch.input_shape}")
    return logits(model.arch, model.weights, images).argmax(axis=1)


def evaluate_top1(model: MaterializedModel, images: np.ndarray, labels: np.ndarray,
                  batch_size: int = 500, workers: int = 1) -> float:
    """Top-1 accuracy in percent over a dataset, batched.

    Batches are independent, so ``workers > 1`` evaluates them on a thread pool.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UsageError("evaluate_top1: empty dataset")
    starts = range(0, len(labels), batch_size)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            preds = list(pool.map(lambda s: predict(model, images[s:s + batch_size]), starts))
    else:
        preds = [predict(model, images[s:s + batch_size]) for s in starts]
    correct = sum(int((p == labels[s:s + batch_size]).sum()) for p, s in zip(preds, starts))
    return 100.0 * correct / len(labels)


@dataclass(frozen=True)
class DomStats:
    mean_sparsity: float
    mean_flops: float
    dense_flops: float
    n_samples: int


def dom_average_stats(ckpt: Checkpoint, spec: TransformSpec | None = None, n_samples: int = 100,
                      dom_seed: int | None = None) -> DomStats:
    """Mean sparsity and FLOPs over DOM draws with seeds ``dom_seed + i``.

    Sparsity is the structural zero fraction of each draw, which depends only
    on the instances and the layer shapes, so no weights are materialized.
    """
    if n_samples < 1:
        raise UsageError("dom_average_stats: n_samples must be >= 1")
    base = ckpt.dom_seed if dom_seed is None else dom_seed
    layers = ckpt.arch.param_layers()
    sizes = {pl.name: int(np.prod(pl.weight_shape)) for pl in layers}
    total = sum(sizes.values())
    sp_sum = 0.0
    fl_sum = 0.0
    for i in range(n_samples):
        insts = dom_instances(ckpt, base + i, spec)
        per = {pl.name: sparsity_of(insts[pl.name], pl.weight_shape) for pl in layers}
        sp_sum += float(sum(per[n] * sizes[n] for n in per) / total)
        fl_sum += flops_model(ckpt.arch, None, {k: float(v) for k, v in per.items()})
    return DomStats(sp_sum / n_samples, fl_sum / n_samples, flops_model(ckpt.arch), n_samples)
