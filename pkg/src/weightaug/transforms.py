"""Random linear transforms of convolution weights.

A :class:`TransformSpec` describes a family (crop, translate, rotate, scale,
identity, or an ordered composition) together with the gate that decides
whether it fires at a given step.  :func:`sample` draws a concrete
:class:`TransformInstance`; :func:`apply` and :func:`adjoint` evaluate the
instance and its transpose as linear maps on a weight tensor.

By default the transform acts on every 2-D spatial kernel ``W[o, c]`` of a
conv weight (``domain="kernel"``).  With ``domain="matrix"`` the whole
``O x (C*kh*kw)`` weight matrix is treated as one grid instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError
from .rng import Purpose, stream

KINDS = ("identity", "crop", "translate", "rotate", "scale", "compose")
DOMAINS = ("kernel", "matrix")
_EPS = 1e-9


@dataclass(frozen=True)
class TransformSpec:
    """A parameterised random transform family.

    ``bounds`` holds the kind's numeric range: area ratio ``(lo, hi)`` for
    crop, maximum fractional shift ``(fy, fx)`` for translate, angles in
    degrees for rotate and zoom factors for scale.  Parts of a composition
    are always applied together; only the outer gate is consulted.
    """

    kind: str = "identity"
    bounds: tuple[float, float] = (0.0, 0.0)
    p_apply: float = 0.5
    kernel_fraction: float = 1.0
    parts: tuple["TransformSpec", ...] = ()
    domain: str = "kernel"

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        object.__setattr__(self, "parts", tuple(self.parts))
        self.validate()

    def validate(self) -> None:
        k = self.kind
        if k not in KINDS:
            raise ConfigError(f"kind: unknown transform kind {k!r}")
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain: must be one of {DOMAINS}, got {self.domain!r}")
        if not 0.0 <= self.p_apply <= 1.0:
            raise ConfigError(f"p_apply: {self.p_apply} outside [0, 1]")
        if not 0.0 < self.kernel_fraction <= 1.0:
            raise ConfigError(f"kernel_fraction: {self.kernel_fraction} outside (0, 1]")
        if len(self.bounds) != 2 or not all(math.isfinite(b) for b in self.bounds):
            raise ConfigError(f"{k}.bounds: expected two finite numbers, got {self.bounds}")
        lo, hi = self.bounds
        if k == "compose":
            object.__setattr__(self, "parts", tuple(
                TransformSpec(p.kind, p.bounds, p_apply=1.0, kernel_fraction=1.0, parts=p.parts,
                              domain=self.domain) for p in self.parts))
            if not self.parts:
                raise ConfigError("compose.parts: composition must not be empty")
            for p in self.parts:
                if p.kind == "compose":
                    raise ConfigError("compose.parts: nested compositions are not allowed")
            return
        if self.parts:
            raise ConfigError(f"{k}.parts: only compose takes parts")
        if k == "crop":
            if lo > hi:
                raise ConfigError(f"crop.low: lower bound {lo} exceeds upper bound {hi}")
            if not (0.0 < lo and hi <= 1.0):
                raise ConfigError(f"crop.bounds: area ratios {self.bounds} must lie in (0, 1]")
        elif k == "translate":
            if not (0.0 <= lo < 1.0 and 0.0 <= hi < 1.0):
                raise ConfigError(f"translate.bounds: shift fractions {self.bounds} must lie in [0, 1)")
        elif k == "rotate":
            if lo > hi:
                raise ConfigError(f"rotate.low: lower bound {lo} exceeds upper bound {hi}")
        elif k == "scale":
            if lo > hi:
                raise ConfigError(f"scale.low: lower bound {lo} exceeds upper bound {hi}")
            if not (0.0 < lo and hi <= 2.0):
                raise ConfigError(f"scale.bounds: zoom factors {self.bounds} must lie in (0, 2]")

    # convenience constructors
    @classmethod
    def identity(cls) -> "TransformSpec":
        return cls()

    @classmethod
    def crop(cls, lo: float, hi: float, **kw) -> "TransformSpec":
        return cls("crop", (lo, hi), **kw)

    @classmethod
    def translate(cls, fy: float, fx: float, **kw) -> "TransformSpec":
        return cls("translate", (fy, fx), **kw)

    @classmethod
    def rotate(cls, lo: float, hi: float, **kw) -> "TransformSpec":
        return cls("rotate", (lo, hi), **kw)

    @classmethod
    def scale(cls, lo: float, hi: float, **kw) -> "TransformSpec":
        return cls("scale", (lo, hi), **kw)

    @classmethod
    def compose(cls, parts: Sequence["TransformSpec"], **kw) -> "TransformSpec":
        return cls("compose", parts=tuple(parts), **kw)

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity" or self.p_apply == 0.0

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "compose":
            d["parts"] = [p.to_dict() for p in self.parts]
        elif self.kind != "identity":
            d["bounds"] = list(self.bounds)
        d["p_apply"] = self.p_apply
        d["kernel_fraction"] = self.kernel_fraction
        d["domain"] = self.domain
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TransformSpec":
        try:
            return cls(
                kind=d["kind"],
                bounds=tuple(d.get("bounds", (0.0, 0.0))),
                p_apply=float(d.get("p_apply", 0.5)),
                kernel_fraction=float(d.get("kernel_fraction", 1.0)),
                parts=tuple(cls.from_dict(p) for p in d.get("parts", ())),
                domain=d.get("domain", "kernel"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"transform spec: malformed entry {d!r}") from exc

    def to_text(self) -> str:
        if self.kind == "identity":
            body = "identity"
        elif self.kind == "compose":
            body = "+".join(f"{p.kind}:{p.bounds[0]!r},{p.bounds[1]!r}" for p in self.parts)
        else:
            body = f"{self.kind}:{self.bounds[0]!r},{self.bounds[1]!r}"
        opts = [f"p={self.p_apply!r}", f"frac={self.kernel_fraction!r}"]
        if self.domain != "kernel":
            opts.append(f"domain={self.domain}")
        return body + "@" + ",".join(opts)

    @classmethod
    def from_text(cls, text: str) -> "TransformSpec":
        return parse_spec(text)


# Named variants: -C crop, -T translate, -R rotate, -CT crop then translate.
PRESETS: dict[str, TransformSpec] = {
    "-C": TransformSpec.crop(0.8, 1.0),
    "-T": TransformSpec.translate(0.3, 0.3),
    "-R": TransformSpec.rotate(0.0, 90.0),
    "-CT": TransformSpec.compose([TransformSpec.crop(0.8, 1.0), TransformSpec.translate(0.3, 0.3)]),
}


def parse_spec(text: str) -> TransformSpec:
    """Parse ``kind:a,b[+kind:a,b...][@p=..,frac=..,domain=..]`` or a preset name."""
    text = text.strip()
    body, _, opt_text = text.partition("@")
    body = body.strip()
    opts: dict[str, Any] = {}
    for item in filter(None, (o.strip() for o in opt_text.split(","))):
        key, eq, val = item.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"transform option {item!r}: expected key=value")
        if key == "p":
            opts["p_apply"] = _num(val, "p")
        elif key == "frac":
            opts["kernel_fraction"] = _num(val, "frac")
        elif key == "domain":
            opts["domain"] = val.strip()
        else:
            raise ConfigError(f"transform option {key!r}: unknown (use p, frac, domain)")
    if body in PRESETS:
        base = PRESETS[body]
        return TransformSpec(base.kind, base.bounds, parts=base.parts, **{"p_apply": base.p_apply, **opts})
    if body == "identity":
        return TransformSpec(**opts)
    terms = [t.strip() for t in body.split("+")]
    parts = [_parse_term(t) for t in terms]
    if len(parts) == 1:
        return TransformSpec(parts[0].kind, parts[0].bounds, **opts)
    return TransformSpec.compose(parts, **opts)


def _num(val: str, what: str) -> float:
    try:
        return float(val)
    except ValueError:
        raise ConfigError(f"{what}: {val!r} is not a number") from None


def _parse_term(term: str) -> TransformSpec:
    kind, colon, args = term.partition(":")
    kind = kind.strip()
    if kind not in KINDS or kind in ("compose", "identity"):
        raise ConfigError(f"kind: unknown transform kind {kind!r} in {term!r}")
    vals = [a for a in args.split(",") if a.strip()]
    if not colon or len(vals) != 2:
        raise ConfigError(f"{kind}.bounds: expected '{kind}:low,high', got {term!r}")
    return TransformSpec(kind, (_num(vals[0], f"{kind}.low"), _num(vals[1], f"{kind}.high")))


@dataclass(frozen=True)
class SpatialOp:
    """One concrete spatial transform on a grid.

    ``params``: crop ``(row0, col0, rows, cols)``; translate ``(dr, dc)``;
    rotate ``(degrees,)``; scale ``(factor,)``.
    """

    kind: str
    params: tuple


@dataclass(frozen=True)
class TransformInstance:
    ops: tuple[SpatialOp, ...] = ()
    kernels: tuple[int, ...] | None = None
    domain: str = "kernel"

    @property
    def kind(self) -> str:
        if not self.ops:
            return "identity"
        return self.ops[0].kind if len(self.ops) == 1 else "compose"

    @property
    def is_identity(self) -> bool:
        return not self.ops

    def to_dict(self) -> dict[str, Any]:
        return {
            "ops": [{"kind": op.kind, "params": list(op.params)} for op in self.ops],
            "kernels": None if self.kernels is None else list(self.kernels),
            "domain": self.domain,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TransformInstance":
        return cls(tuple(SpatialOp(o["kind"], tuple(o["params"])) for o in d["ops"]),
                   None if d["kernels"] is None else tuple(d["kernels"]), d["domain"])


IDENTITY = TransformInstance()


def make_instance(kind: str, *params, kernels=None, domain: str = "kernel") -> TransformInstance:
    """Build a single-op instance by hand, e.g. ``make_instance("translate", 1, 0)``."""
    if kind == "identity":
        return TransformInstance(kernels=kernels, domain=domain)
    return TransformInstance((SpatialOp(kind, tuple(params)),), kernels, domain)


def grid_shape(shape: Sequence[int], domain: str = "kernel") -> tuple[int, int]:
    """Spatial grid a transform acts on for a weight of ``shape``."""
    if domain == "matrix":
        return int(shape[0]), int(np.prod(shape[1:], dtype=np.int64)) if len(shape) > 1 else 1
    if len(shape) == 4:
        return int(shape[2]), int(shape[3])
    return 1, 1


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + _EPS))


def max_shift(fraction: float, extent: int) -> int:
    return _round_half_up(fraction * extent)


def _sample_op(spec: TransformSpec, gh: int, gw: int, rng: np.random.Generator) -> SpatialOp:
    lo, hi = spec.bounds
    if spec.kind == "crop":
        ratio = float(rng.uniform(lo, hi))
        side = math.sqrt(ratio)
        u = rng.random(2)
        dims = []
        for extent, ui in zip((gh, gw), u):
            x = side * extent
            n = int(math.floor(x + _EPS))
            if ui < x - n:
                n += 1
            dims.append(min(max(n, 1), extent))
        rows, cols = dims
        row0 = int(rng.integers(0, gh - rows + 1))
        col0 = int(rng.integers(0, gw - cols + 1))
        return SpatialOp("crop", (row0, col0, rows, cols))
    if spec.kind == "translate":
        my, mx = max_shift(lo, gh), max_shift(hi, gw)
        return SpatialOp("translate", (int(rng.integers(-my, my + 1)), int(rng.integers(-mx, mx + 1))))
    if spec.kind == "rotate":
        return SpatialOp("rotate", (float(rng.uniform(lo, hi)),))
    if spec.kind == "scale":
        return SpatialOp("scale", (float(rng.uniform(lo, hi)),))
    raise ConfigError(f"kind: cannot sample {spec.kind!r}")


def sample(spec: TransformSpec, shape: Sequence[int], rng: np.random.Generator) -> TransformInstance:
    """Draw one instance for a weight of ``shape``.

    The gate fires with probability ``p_apply``; parameters are then drawn
    uniformly from the spec's ranges and a uniform subset of
    ``ceil(kernel_fraction * O)`` output channels is selected.  Grids of
    extent 1x1 always yield the identity.
    """
    if spec.kind == "identity":
        return TransformInstance(domain=spec.domain)
    if rng.random() >= spec.p_apply:
        return TransformInstance(domain=spec.domain)
    gh, gw = grid_shape(shape, spec.domain)
    if gh == 1 and gw == 1:
        return TransformInstance(domain=spec.domain)
    parts = spec.parts if spec.kind == "compose" else (spec,)
    ops = tuple(_sample_op(p, gh, gw, rng) for p in parts if p.kind != "identity")
    n_out = int(shape[0])
    k = min(n_out, max(1, math.ceil(spec.kernel_fraction * n_out - _EPS)))
    kernels = None if k == n_out else tuple(sorted(int(i) for i in rng.choice(n_out, size=k, replace=False)))
    return TransformInstance(ops, kernels, spec.domain)


def sample_keyed(spec: TransformSpec, shape: Sequence[int], seed: int, layer_id: int, step: int,
                 purpose: Purpose = Purpose.TRANSFORM) -> TransformInstance:
    """Sample from the stream keyed by ``(seed, purpose, layer_id, step)``."""
    return sample(spec, shape, stream(seed, purpose, layer_id, step))


# --- grid operators -------------------------------------------------------

_EXACT_TRIG = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}


def _source_coords(op: SpatialOp, gh: int, gw: int) -> tuple[np.ndarray, np.ndarray]:
    cy, cx = (gh - 1) / 2.0, (gw - 1) / 2.0
    r, c = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    y, x = r - cy, c - cx
    if op.kind == "rotate":
        deg = float(op.params[0])
        if deg % 90.0 == 0.0:
            cos, sin = _EXACT_TRIG[int(deg // 90.0) % 4]
        else:
            rad = math.radians(deg)
            cos, sin = math.cos(rad), math.sin(rad)
        sy = cy + cos * y + sin * x
        sx = cx - sin * y + cos * x
    else:
        s = float(op.params[0])
        sy, sx = cy + y / s, cx + x / s
    return sy.ravel(), sx.ravel()


def bilinear_taps(sy: np.ndarray, sx: np.ndarray, gh: int, gw: int) -> tuple[np.ndarray, np.ndarray]:
    """Four-tap bilinear stencil for source points; taps off the grid get weight 0."""
    y0, x0 = np.floor(sy), np.floor(sx)
    fy, fx = sy - y0, sx - x0
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    idx, wts = [], []
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        inside = (yy >= 0) & (yy < gh) & (xx >= 0) & (xx < gw) & (w != 0)
        idx.append(np.where(inside, yy * gw + xx, 0))
        wts.append(np.where(inside, w, 0.0))
    return np.stack(idx, axis=1), np.stack(wts, axis=1)


def _taps(op: SpatialOp, gh: int, gw: int):
    sy, sx = _source_coords(op, gh, gw)
    return bilinear_taps(sy, sx, gh, gw)


def _shift(x: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """``out[..., r, c] = x[..., r - dr, c - dc]`` with zero fill."""
    gh, gw = x.shape[-2:]
    out = np.zeros_like(x)
    if abs(dr) >= gh or abs(dc) >= gw:
        return out
    out[..., max(dr, 0):gh + min(dr, 0), max(dc, 0):gw + min(dc, 0)] = \
        x[..., max(-dr, 0):gh - max(dr, 0), max(-dc, 0):gw - max(dc, 0)]
    return out


def _crop_mask(op: SpatialOp, gh: int, gw: int) -> np.ndarray:
    r0, c0, rows, cols = op.params
    m = np.zeros((gh, gw), dtype=bool)
    m[r0:r0 + rows, c0:c0 + cols] = True
    return m


def _op_forward(op: SpatialOp, x: np.ndarray) -> np.ndarray:
    gh, gw = x.shape[-2:]
    if op.kind == "crop":
        return np.where(_crop_mask(op, gh, gw), x, x.dtype.type(0))
    if op.kind == "translate":
        return _shift(x, int(op.params[0]), int(op.params[1]))
    idx, wts = _taps(op, gh, gw)
    flat = x.reshape(-1, gh * gw)
    out = np.einsum("bkt,kt->bk", flat[:, idx].astype(np.float64), wts)
    return out.reshape(x.shape).astype(x.dtype)


def _op_adjoint(op: SpatialOp, g: np.ndarray) -> np.ndarray:
    gh, gw = g.shape[-2:]
    if op.kind == "crop":
        return np.where(_crop_mask(op, gh, gw), g, g.dtype.type(0))
    if op.kind == "translate":
        return _shift(g, -int(op.params[0]), -int(op.params[1]))
    idx, wts = _taps(op, gh, gw)
    n = gh * gw
    flat = g.reshape(-1, n).astype(np.float64)
    b = flat.shape[0]
    target = (np.arange(b)[:, None, None] * n + idx[None]).ravel()
    contrib = (flat[:, :, None] * wts[None]).ravel()
    out = np.bincount(target, weights=contrib, minlength=b * n)
    return out.reshape(g.shape).astype(g.dtype)


def _as_grids(w: np.ndarray, domain: str) -> np.ndarray:
    """View ``w`` as a stack (O, B, gh, gw) of grids grouped by output channel."""
    if domain == "matrix":
        return w.reshape(w.shape[0], -1)[None, None]
    if w.ndim == 4:
        return w
    return w.reshape(w.shape[0], -1, 1, 1)


def _run(instance: TransformInstance, w: np.ndarray, forward: bool) -> np.ndarray:
    w = np.asarray(w)
    if w.dtype != np.float64:
        w = w.astype(np.float32, copy=False)
    if instance.is_identity:
        return w.copy()
    gh, gw = grid_shape(w.shape, instance.domain)
    if gh == 1 and gw == 1:
        return w.copy()
    ops = instance.ops if forward else tuple(reversed(instance.ops))
    step = _op_forward if forward else _op_adjoint
    if instance.domain == "matrix":
        grid = w.reshape(w.shape[0], -1)
        out = grid
        for op in ops:
            out = step(op, out)
        if instance.kernels is not None:
            keep = np.ones(w.shape[0], dtype=bool)
            keep[list(instance.kernels)] = False
            out = out.copy()
            out[keep] = grid[keep]
        return np.ascontiguousarray(out.reshape(w.shape))
    grids = _as_grids(w, "kernel")
    sel = slice(None) if instance.kernels is None else list(instance.kernels)
    part = grids[sel]
    for op in ops:
        part = step(op, part)
    out = grids.copy()
    out[sel] = part
    return out.reshape(w.shape)


def apply(instance: TransformInstance, w: np.ndarray) -> np.ndarray:
    """Evaluate the instance on weight ``w``; shape is preserved."""
    return _run(instance, w, forward=True)


def adjoint(instance: TransformInstance, g: np.ndarray) -> np.ndarray:
    """Evaluate the transpose of :func:`apply` on ``g``."""
    return _run(instance, g, forward=False)


def zero_mask(instance: TransformInstance, shape: Sequence[int]) -> np.ndarray:
    """Boolean mask of entries that ``apply`` forces to zero regardless of the weight values."""
    shape = tuple(int(s) for s in shape)
    if instance.is_identity:
        return np.zeros(shape, dtype=bool)
    # all operators have non-negative coefficients, so a row of the composite
    # operator is empty exactly when it maps the all-ones tensor to zero
    ones = np.ones(shape, dtype=np.float32)
    out = _run(instance, ones, forward=True)
    return out == 0


def sparsity_of(instance: TransformInstance, shape: Sequence[int]) -> Fraction:
    """Fraction of entries structurally zeroed by ``instance`` on a weight of ``shape``."""
    shape = tuple(int(s) for s in shape)
    total = int(np.prod(shape, dtype=np.int64))
    if instance.is_identity or total == 0:
        return Fraction(0)
    gh, gw = grid_shape(shape, instance.domain)
    if gh == 1 and gw == 1:
        return Fraction(0)
    if instance.domain == "kernel":
        # count zeros on one representative kernel grid
        per_grid = int(zero_mask(TransformInstance(instance.ops), (1, 1, gh, gw)).sum())
        n_sel = shape[0] if instance.kernels is None else len(instance.kernels)
        return Fraction(n_sel * per_grid, shape[0] * gh * gw)
    return Fraction(int(zero_mask(instance, shape).sum()), total)
