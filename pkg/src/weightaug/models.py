"""Architecture definitions and the forward pass over them.

An architecture is a flat list of layers.  Layers with parameters
(``conv`` and ``linear``) are numbered in order; that number is the stable
``layer_id`` used to key random streams and checkpoint manifests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .rng import Purpose, stream

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "linear")


@dataclass(frozen=True)
class LayerDef:
    kind: str
    name: str = ""
    out: int = 0           # conv output channels / linear output width
    k: int = 0             # conv kernel side / pool window
    stride: int = 1
    padding: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "name": self.name, "out": self.out, "k": self.k,
                "stride": self.stride, "padding": self.padding}


@dataclass(frozen=True)
class ParamLayer:
    """Resolved shape information for a conv/linear layer."""

    layer_id: int
    name: str
    kind: str
    weight_shape: tuple[int, ...]
    out_hw: tuple[int, int]
    stride: int = 1
    padding: int = 0

    @property
    def macs(self) -> int:
        n = int(np.prod(self.weight_shape, dtype=np.int64))
        return n * self.out_hw[0] * self.out_hw[1] if self.kind == "conv" else n


@dataclass(frozen=True)
class ArchitectureDef:
    arch_id: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[LayerDef, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.param_layers()  # validates

    def param_layers(self, input_hw: tuple[int, int] | None = None) -> list[ParamLayer]:
        """Walk the layer list, checking that shapes compose."""
        c, h, w = self.input_shape
        if input_hw is not None:
            h, w = input_hw
        flat: int | None = None
        out: list[ParamLayer] = []
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.kind})"
            if layer.kind not in LAYER_KINDS:
                raise ConfigError(f"{where}: unknown layer kind")
            if layer.kind == "conv":
                if flat is not None:
                    raise ConfigError(f"{where}: conv after flatten")
                h2, w2 = (T.conv_output_size(h, layer.k, layer.stride, layer.padding),
                          T.conv_output_size(w, layer.k, layer.stride, layer.padding))
                out.append(ParamLayer(len(out), layer.name or f"conv{len(out) + 1}", "conv",
                                      (layer.out, c, layer.k, layer.k), (h2, w2), layer.stride, layer.padding))
                c, h, w = layer.out, h2, w2
            elif layer.kind == "maxpool":
                if flat is not None or h < layer.k or w < layer.k:
                    raise ConfigError(f"{where}: pool window {layer.k} does not fit {h}x{w}")
                s = layer.stride or layer.k
                h, w = (h - layer.k) // s + 1, (w - layer.k) // s + 1
            elif layer.kind == "flatten":
                flat = c * h * w
            elif layer.kind == "linear":
                if flat is None:
                    raise ConfigError(f"{where}: linear layer needs a preceding flatten")
                out.append(ParamLayer(len(out), layer.name or f"fc{len(out) + 1}", "linear",
                                      (layer.out, flat), (1, 1)))
                flat = layer.out
        final = flat if flat is not None else c * h * w
        if final != self.num_classes:
            raise ConfigError(f"{self.arch_id}: final width {final} != num_classes {self.num_classes}")
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise ConfigError(f"{self.arch_id}: duplicate layer names {names}")
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"arch_id": self.arch_id, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ArchitectureDef":
        try:
            return cls(d["arch_id"], tuple(d["input_shape"]), int(d["num_classes"]),
                       tuple(LayerDef(**l) for l in d["layers"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"architecture: malformed definition ({exc})") from exc


def smallcnn(in_channels: int = 3, hw: int = 32, num_classes: int = 10) -> ArchitectureDef:
    """conv3x3(32) relu pool conv3x3(64) relu pool conv3x3(64) relu linear."""
    layers = (
        LayerDef("conv", "conv1", 32, 3, 1, 1), LayerDef("relu"), LayerDef("maxpool", k=2, stride=2),
        LayerDef("conv", "conv2", 64, 3, 1, 1), LayerDef("relu"), LayerDef("maxpool", k=2, stride=2),
        LayerDef("conv", "conv3", 64, 3, 1, 1), LayerDef("relu"),
        LayerDef("flatten"), LayerDef("linear", "fc", num_classes),
    )
    return ArchitectureDef("smallcnn", (in_channels, hw, hw), num_classes, layers)


VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


def vgg16c(in_channels: int = 3, hw: int = 32, num_classes: int = 10) -> ArchitectureDef:
    """13-conv VGG16 for 32x32 inputs with a single linear classifier."""
    layers: list[LayerDef] = []
    n = 0
    for v in VGG16_CFG:
        if v == "M":
            layers.append(LayerDef("maxpool", k=2, stride=2))
        else:
            n += 1
            layers += [LayerDef("conv", f"conv{n}", v, 3, 1, 1), LayerDef("relu")]
    layers += [LayerDef("flatten"), LayerDef("linear", "fc", num_classes)]
    return ArchitectureDef("vgg16c", (in_channels, hw, hw), num_classes, tuple(layers))


def parse_layers(text: str) -> tuple[LayerDef, ...]:
    """Parse ``conv:OUT,K[,STRIDE,PAD]; relu; maxpool:K[,STRIDE]; flatten; linear:OUT``."""
    layers = []
    n = 0
    for item in filter(None, (t.strip() for t in text.split(";"))):
        kind, _, args = item.partition(":")
        kind = kind.strip()
        try:
            vals = [int(a) for a in args.split(",") if a.strip()]
        except ValueError:
            raise ConfigError(f"layers: bad integer argument in {item!r}") from None
        if kind == "conv" and len(vals) in (2, 4):
            layers.append(LayerDef("conv", f"conv{n + 1}", vals[0], vals[1], *(vals[2:] or [1, 0])))
            n += 1
        elif kind == "linear" and len(vals) == 1:
            layers.append(LayerDef("linear", f"fc{n + 1}", vals[0]))
            n += 1
        elif kind == "maxpool" and len(vals) in (1, 2):
            layers.append(LayerDef("maxpool", k=vals[0], stride=vals[1] if len(vals) == 2 else vals[0]))
        elif kind in ("relu", "flatten") and not vals:
            layers.append(LayerDef(kind))
        else:
            raise ConfigError(f"layers: cannot parse {item!r}")
    return tuple(layers)


def build(arch_id: str, in_channels: int, hw: int, num_classes: int, layers: str = "") -> ArchitectureDef:
    if arch_id == "smallcnn":
        return smallcnn(in_channels, hw, num_classes)
    if arch_id == "vgg16c":
        return vgg16c(in_channels, hw, num_classes)
    if arch_id == "custom":
        return ArchitectureDef("custom", (in_channels, hw, hw), num_classes, parse_layers(layers))
    raise ConfigError(f"architecture: unknown id {arch_id!r} (smallcnn, vgg16c, custom)")


def init_params(arch: ArchitectureDef, seed: int) -> dict[str, np.ndarray]:
    """Kaiming-uniform (fan-in) weights and zero biases, one stream per layer."""
    params: dict[str, np.ndarray] = {}
    for pl in arch.param_layers():
        fan_in = int(np.prod(pl.weight_shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        rng = stream(seed, Purpose.INIT, pl.layer_id)
        params[f"{pl.name}.weight"] = rng.uniform(-bound, bound, pl.weight_shape).astype(np.float32)
        params[f"{pl.name}.bias"] = np.zeros(pl.weight_shape[0], dtype=np.float32)
    return params


def forward(arch: ArchitectureDef, weights: Mapping[str, T.Tensor], x: T.Tensor,
            trace: Callable[[str, T.Tensor], None] | None = None) -> T.Tensor:
    """Run the network; ``weights`` maps ``"<layer>.weight"``/``"<layer>.bias"`` to tensors."""
    names = iter(pl.name for pl in arch.param_layers())
    for layer in arch.layers:
        if layer.kind == "conv":
            name = next(names)
            x = T.conv2d(x, weights[f"{name}.weight"], weights[f"{name}.bias"], layer.stride, layer.padding)
        elif layer.kind == "linear":
            name = next(names)
            x = T.linear(x, weights[f"{name}.weight"], weights[f"{name}.bias"])
        elif layer.kind == "relu":
            x = T.relu(x)
        elif layer.kind == "maxpool":
            x = T.maxpool2d(x, layer.k, layer.stride or layer.k)
        else:
            x = T.flatten(x)
            continue
        if trace is not None and layer.kind in ("conv", "linear"):
            trace(name, x)
    if x.data.ndim != 2:
        x = T.flatten(x)
    return x


def logits(arch: ArchitectureDef, weights: Mapping[str, np.ndarray], images: np.ndarray) -> np.ndarray:
    """Inference-only forward pass over plain arrays."""
    tw = {k: T.Tensor(v) for k, v in weights.items()}
    return forward(arch, tw, T.Tensor(images)).data
