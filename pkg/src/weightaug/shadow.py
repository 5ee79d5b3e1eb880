"""Training where the loss is computed on transformed (shadow) weights.

Each optimizer step samples one transform instance per layer, runs the
forward pass with ``SW = T(PW)``, back-propagates to ``SW`` and routes the
gradient to the plain weights through the transform's adjoint.  Only plain
weights and biases are ever updated or stored.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import ConfigError, NonFiniteLossError, UsageError
from .models import ArchitectureDef, forward, init_params
from .rng import Purpose, stream
from .transforms import (IDENTITY, TransformInstance, TransformSpec, adjoint, apply,
                         sample_keyed)

log = logging.getLogger(__name__)

GRADIENT_MODES = ("adjoint", "straight_through")


@dataclass
class ShadowLayer:
    name: str
    layer_id: int
    plain_weight: np.ndarray
    bias: np.ndarray
    spec: TransformSpec
    current_instance: TransformInstance = IDENTITY

    def shadow_weight(self) -> np.ndarray:
        return apply(self.current_instance, self.plain_weight)


@dataclass
class OptimizerState:
    """SGD with heavy-ball momentum: ``v = mu*v + g; p -= lr*v``."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        lr, mu = np.float32(self.learning_rate), np.float32(self.momentum)
        for name, p in params.items():
            g = grads[name]
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            if v.shape != p.shape:
                raise UsageError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
            v *= mu
            v += g
            p -= lr * v


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 1
    master_seed: int = 0
    architecture: str = "smallcnn"
    dataset: str = "cifar10"
    specs: dict[str, TransformSpec] = field(default_factory=dict)
    learning_rate: float = 0.01
    momentum: float = 0.9
    gradient: str = "adjoint"
    dom_seed: int = 0
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size: must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs: must be >= 1, got {self.epochs}")
        if self.gradient not in GRADIENT_MODES:
            raise ConfigError(f"train.gradient: must be one of {GRADIENT_MODES}")
        if self.master_seed < 0 or self.dom_seed < 0:
            raise ConfigError("train.seed: seeds must be non-negative")
        if not (self.learning_rate > 0 and 0 <= self.momentum < 1):
            raise ConfigError("train.lr/train.momentum: need lr > 0 and 0 <= momentum < 1")


def resolve_specs(arch: ArchitectureDef, group_specs: Mapping[str, TransformSpec]) -> dict[str, TransformSpec]:
    """Per-layer spec from a mapping keyed by layer name or by kind (``conv``/``linear``)."""
    layers = arch.param_layers()
    known = {pl.name for pl in layers} | {"conv", "linear"}
    unknown = set(group_specs) - known
    if unknown:
        raise ConfigError(f"was: unknown layer groups {sorted(unknown)}")
    return {pl.name: group_specs.get(pl.name, group_specs.get(pl.kind, TransformSpec.identity()))
            for pl in layers}


class ShadowModel:
    """Plain weights of an architecture plus the per-layer transform specs."""

    def __init__(self, arch: ArchitectureDef, layers: list[ShadowLayer], master_seed: int,
                 dom_seed: int = 0, step: int = 0):
        self.arch = arch
        self.layers = layers
        self.master_seed = master_seed
        self.dom_seed = dom_seed
        self.step = step
        self.training = True

    @classmethod
    def create(cls, arch: ArchitectureDef, specs: Mapping[str, TransformSpec], master_seed: int,
               dom_seed: int = 0) -> "ShadowModel":
        per_layer = resolve_specs(arch, specs)
        params = init_params(arch, master_seed)
        layers = [ShadowLayer(pl.name, pl.layer_id, params[f"{pl.name}.weight"],
                              params[f"{pl.name}.bias"], per_layer[pl.name])
                  for pl in arch.param_layers()]
        return cls(arch, layers, master_seed, dom_seed)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ShadowModel":
        layers = []
        for pl in ckpt.arch.param_layers():
            layers.append(ShadowLayer(pl.name, pl.layer_id, ckpt.params[f"{pl.name}.weight"].copy(),
                                      ckpt.params[f"{pl.name}.bias"].copy(),
                                      ckpt.specs.get(pl.name, TransformSpec.identity())))
        return cls(ckpt.arch, layers, ckpt.master_seed, ckpt.dom_seed, ckpt.step)

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            out[f"{layer.name}.weight"] = layer.plain_weight
            out[f"{layer.name}.bias"] = layer.bias
        return out

    def to_checkpoint(self, optimizer: OptimizerState | None = None, meta=None) -> Checkpoint:
        return Checkpoint(
            self.arch, {k: v.copy() for k, v in self.params().items()},
            {l.name: l.spec for l in self.layers}, self.master_seed, self.dom_seed, self.step,
            {k: v.copy() for k, v in (optimizer.velocity if optimizer else {}).items()},
            dict(meta or {}))

    def sample_instances(self, step_index: int) -> None:
        for layer in self.layers:
            layer.current_instance = sample_keyed(layer.spec, layer.plain_weight.shape,
                                                  self.master_seed, layer.layer_id, step_index)


def _first_nonfinite(trace: list[tuple[str, T.Tensor]]) -> str:
    for name, out in trace:
        if not np.isfinite(out.data).all():
            return name
    return "loss"


def train_step(model: ShadowModel, images: np.ndarray, labels: np.ndarray, step_index: int,
               optimizer: OptimizerState, gradient: str = "adjoint") -> float:
    """One SGD step driven by shadow weights; returns the batch loss."""
    if not model.training:
        raise UsageError("train_step: model is not in training mode")
    if len(labels) == 0:
        raise UsageError("train_step: empty batch")
    model.sample_instances(step_index)
    leaves: dict[str, T.Tensor] = {}
    shadow: dict[str, np.ndarray] = {}
    for layer in model.layers:
        sw = layer.shadow_weight()
        shadow[layer.name] = sw
        leaves[f"{layer.name}.weight"] = T.Tensor(sw, requires_grad=True)
        leaves[f"{layer.name}.bias"] = T.Tensor(layer.bias, requires_grad=True)
    bad = [name for name, w in shadow.items() if not np.isfinite(w).all()]
    if bad:
        raise NonFiniteLossError(f"non-finite weights at step {step_index}; first non-finite layer: {bad[0]}",
                                 layer=bad[0])
    trace: list[tuple[str, T.Tensor]] = []
    out = forward(model.arch, leaves, T.Tensor(images), trace=lambda n, t: trace.append((n, t)))
    loss = T.softmax_cross_entropy(out, labels)
    value = loss.data.item()
    if not math.isfinite(value):
        where = _first_nonfinite(trace)
        raise NonFiniteLossError(f"non-finite loss at step {step_index}; first non-finite layer: {where}",
                                 layer=where)
    T.backward(loss)
    grads: dict[str, np.ndarray] = {}
    for layer in model.layers:
        g_sw = leaves[f"{layer.name}.weight"].grad
        grads[f"{layer.name}.weight"] = (adjoint(layer.current_instance, g_sw)
                                         if gradient == "adjoint" else g_sw)
        grads[f"{layer.name}.bias"] = leaves[f"{layer.name}.bias"].grad
    bad = [k.rsplit(".", 1)[0] for k, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NonFiniteLossError(f"non-finite gradient at step {step_index}; first non-finite layer: {bad[0]}",
                                 layer=bad[0])
    optimizer.step(model.params(), grads)
    model.step = step_index + 1
    return value


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    test_top1_aom: float | None = None
    test_top1_dom: float | None = None


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def epoch_order(master_seed: int, epoch: int, n: int) -> np.ndarray:
    return stream(master_seed, Purpose.SHUFFLE, epoch).permutation(n)


def _check_data(arch: ArchitectureDef, images: np.ndarray, labels: np.ndarray) -> None:
    if images.ndim != 4 or tuple(images.shape[1:]) != arch.input_shape:
        raise ConfigError(f"dataset images {images.shape[1:]} do not match architecture input "
                          f"{arch.input_shape}")
    if len(images) != len(labels) or len(labels) == 0:
        raise ConfigError("dataset: images and labels must be non-empty and of equal length")
    if labels.min() < 0 or labels.max() >= arch.num_classes:
        raise ConfigError(f"dataset labels exceed {arch.num_classes} classes of {arch.arch_id}")


def train(config: TrainConfig, arch: ArchitectureDef, train_set, test_set=None, *,
          resume: Checkpoint | None = None, max_steps: int | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None, meta=None) -> Checkpoint:
    """Run ``epochs * ceil(N / batch_size)`` shadow-weight steps and return a checkpoint.

    ``train_set``/``test_set`` expose ``images`` and ``labels`` arrays.  With
    ``resume`` the run continues from the checkpoint's step count, and
    ``max_steps`` stops early at that total step index.
    """
    images, labels = train_set.images, np.asarray(train_set.labels)
    _check_data(arch, images, labels)
    if resume is not None:
        model = ShadowModel.from_checkpoint(resume)
        if model.arch != arch:
            raise ConfigError("resume: checkpoint architecture differs from the configured one")
        opt = OptimizerState(config.learning_rate, config.momentum,
                             {k: v.copy() for k, v in resume.velocity.items()})
    else:
        model = ShadowModel.create(arch, config.specs, config.master_seed, config.dom_seed)
        opt = OptimizerState(config.learning_rate, config.momentum)
    n = len(labels)
    spe = steps_per_epoch(n, config.batch_size)
    total = config.epochs * spe if max_steps is None else min(max_steps, config.epochs * spe)
    epoch_loss, epoch_count = 0.0, 0
    order, order_epoch = None, -1
    while model.step < total:
        s = model.step
        epoch, pos = divmod(s, spe)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(model.master_seed, epoch, n), epoch
        idx = order[pos * config.batch_size:(pos + 1) * config.batch_size]
        loss = train_step(model, images[idx], labels[idx], s, opt, config.gradient)
        epoch_loss += loss * len(idx)
        epoch_count += len(idx)
        if model.step % spe == 0:
            rec = EpochLog(epoch, epoch_loss / epoch_count)
            if test_set is not None:
                rec = _with_test_metrics(rec, model, opt, test_set, config)
            log.info("epoch %d loss %.4f aom %s dom %s", rec.epoch, rec.train_loss,
                     rec.test_top1_aom, rec.test_top1_dom)
            if on_epoch is not None:
                on_epoch(rec)
            epoch_loss, epoch_count = 0.0, 0
    return model.to_checkpoint(opt, meta)


def _with_test_metrics(rec: EpochLog, model: ShadowModel, opt: OptimizerState, test_set,
                       config: TrainConfig) -> EpochLog:
    from .dualmode import ModeConfig, evaluate_top1, materialize

    ckpt = model.to_checkpoint(opt)
    aom = evaluate_top1(materialize(ckpt, ModeConfig("aom")), test_set.images, test_set.labels,
                        config.eval_batch_size)
    dom = evaluate_top1(materialize(ckpt, ModeConfig("dom", model.dom_seed)), test_set.images,
                        test_set.labels, config.eval_batch_size)
    return EpochLog(rec.epoch, rec.train_loss, aom, dom)


# --- gradient verification -------------------------------------------------

def _conv64(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out + b[None, :, None, None]


def reference_loss(arch: ArchitectureDef, weights: Mapping[str, np.ndarray], images: np.ndarray,
                   labels: np.ndarray) -> float:
    """Float64 loss computed without the autograd engine (finite-difference oracle)."""
    x = np.asarray(images, dtype=np.float64)
    names = iter(pl.name for pl in arch.param_layers())
    for layer in arch.layers:
        if layer.kind == "conv":
            nm = next(names)
            x = _conv64(x, weights[f"{nm}.weight"], weights[f"{nm}.bias"], layer.stride, layer.padding)
        elif layer.kind == "linear":
            nm = next(names)
            x = x @ np.asarray(weights[f"{nm}.weight"], np.float64).T + weights[f"{nm}.bias"]
        elif layer.kind == "relu":
            x = np.maximum(x, 0.0)
        elif layer.kind == "maxpool":
            k, s = layer.k, layer.stride or layer.k
            n, c, h, w = x.shape
            ho, wo = (h - k) // s + 1, (w - k) // s + 1
            x = np.max([x[:, :, i:i + s * ho:s, j:j + s * wo:s] for i in range(k) for j in range(k)], axis=0)
        else:
            x = x.reshape(x.shape[0], -1)
    x = x.reshape(x.shape[0], -1)
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    n_coords: int
    per_layer: dict[str, float]
    masked_coords: int
    masked_fd_all_zero: bool


def _rel_err(a: float, n: float, floor: float) -> float:
    den = max(abs(a), abs(n), floor)
    return 0.0 if den == 0.0 else abs(a - n) / den


def gradient_path_check(model: ShadowModel, images: np.ndarray, labels: np.ndarray,
                        instances: Mapping[str, TransformInstance] | None = None, *,
                        n_coords: int = 200, eps: float = 1e-5, seed: int = 0,
                        floor: float = 1e-4, gradient: str = "adjoint") -> GradCheckReport:
    """Compare adjoint-routed plain-weight gradients with central differences.

    The finite differences perturb ``PW`` and evaluate ``J(T(PW))`` in
    float64 with the instances frozen.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.  The float64 oracle allows a small
    ``eps``, which keeps the stencil clear of ReLU and max-pool kinks.
    Without ``instances`` the model draws them for its current step.
    """
    if instances is None:
        model.sample_instances(model.step)
    else:
        for layer in model.layers:
            layer.current_instance = instances.get(layer.name, IDENTITY)
    leaves = {}
    for layer in model.layers:
        leaves[f"{layer.name}.weight"] = T.Tensor(layer.shadow_weight(), requires_grad=True)
        leaves[f"{layer.name}.bias"] = T.Tensor(layer.bias, requires_grad=True)
    loss = T.softmax_cross_entropy(forward(model.arch, leaves, T.Tensor(images)), labels)
    T.backward(loss)
    analytic = {}
    for layer in model.layers:
        g = leaves[f"{layer.name}.weight"].grad
        analytic[layer.name] = adjoint(layer.current_instance, g) if gradient == "adjoint" else g

    pw64 = {layer.name: layer.plain_weight.astype(np.float64) for layer in model.layers}
    biases = {f"{l.name}.bias": l.bias.astype(np.float64) for l in model.layers}

    def loss_at(name: str, flat_idx: int, delta: float) -> float:
        weights = dict(biases)
        for layer in model.layers:
            w = pw64[layer.name]
            if layer.name == name:
                w = w.copy()
                w.flat[flat_idx] += delta
            weights[f"{layer.name}.weight"] = apply(layer.current_instance, w)
        return reference_loss(model.arch, weights, images, labels)

    rng = np.random.default_rng(seed)
    per_layer: dict[str, float] = {}
    counts = np.full(len(model.layers), n_coords // len(model.layers))
    counts[: n_coords % len(model.layers)] += 1
    masked, masked_zero, total = 0, True, 0
    worst = 0.0
    for layer, cnt in zip(model.layers, counts):
        size = layer.plain_weight.size
        picks = rng.choice(size, size=min(int(cnt), size), replace=False)
        zero_rows = None
        if not layer.current_instance.is_identity:
            # coordinates of PW that no output of T depends on
            probe = np.ones_like(pw64[layer.name])
            zero_rows = adjoint(layer.current_instance, probe) == 0
        err = 0.0
        for i in picks:
            num = (loss_at(layer.name, int(i), eps) - loss_at(layer.name, int(i), -eps)) / (2 * eps)
            a = float(analytic[layer.name].flat[i])
            if zero_rows is not None and zero_rows.flat[i]:
                masked += 1
                masked_zero &= num == 0.0 and a == 0.0
            err = max(err, _rel_err(a, num, floor))
            total += 1
        per_layer[layer.name] = err
        worst = max(worst, err)
    return GradCheckReport(worst, total, per_layer, masked, masked_zero)
