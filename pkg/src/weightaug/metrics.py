"""Evaluation metrics: top-1, drop rate, MAC-based FLOPs and sparsity."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .models import ArchitectureDef

CSV_COLUMNS = ("tag", "mode", "perturb", "top1", "drop_rate", "flops_m", "sparsity")


def top1(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Percentage of predictions equal to their label."""
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.size == 0 or p.shape != y.shape:
        raise UsageError(f"top1: need equal, non-empty inputs (got {p.shape} and {y.shape})")
    return 100.0 * int((p == y).sum()) / p.size


def drop_rate(clean_top1: float, perturbed_top1: float) -> float:
    """Accuracy lost under perturbation, in absolute percentage points."""
    return float(clean_top1) - float(perturbed_top1)


def flops_model(arch: ArchitectureDef, input_hw: tuple[int, int] | None = None,
                per_layer_sparsity: Mapping[str, float] | None = None,
                flops_per_mac: int = 1) -> float:
    """Multiply-accumulate count of the conv and linear layers.

    Each layer's dense count is scaled by ``1 - sparsity`` for that layer
    (keyed by layer name).  Activations and pooling are not counted.  Pass
    ``flops_per_mac=2`` for the convention that counts multiply and add
    separately.
    """
    sparsity = dict(per_layer_sparsity or {})
    layers = arch.param_layers(input_hw)
    unknown = set(sparsity) - {pl.name for pl in layers}
    if unknown:
        raise ConfigError(f"flops_model: unknown layers {sorted(unknown)}")
    total = 0.0
    for pl in layers:
        if pl.kind not in ("conv", "linear"):
            raise ConfigError(f"flops_model: unknown layer kind {pl.kind!r}")
        s = float(sparsity.get(pl.name, 0.0))
        if not 0.0 <= s <= 1.0:
            raise ConfigError(f"flops_model: sparsity {s} of {pl.name} outside [0, 1]")
        total += pl.macs if s == 0.0 else pl.macs * (1.0 - s)
    return total * flops_per_mac


def dense_macs(arch: ArchitectureDef, input_hw: tuple[int, int] | None = None) -> int:
    """Exact integer MAC count with no sparsity."""
    return sum(pl.macs for pl in arch.param_layers(input_hw))


def sparsity_rate_model(weights: Iterable[np.ndarray]) -> float:
    """Zero entries divided by total entries over all given weight tensors."""
    zeros = total = 0
    for w in weights:
        w = np.asarray(w)
        zeros += int(w.size - np.count_nonzero(w))
        total += w.size
    if total == 0:
        raise UsageError("sparsity_rate_model: no weight entries")
    return zeros / total


@dataclass(frozen=True)
class MetricsRecord:
    tag: str
    mode: str
    perturb: str
    top1: float
    drop_rate: float
    flops: float
    sparsity_rate: float

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 100.0:
            raise UsageError(f"top1 {self.top1} outside [0, 100]")
        if not 0.0 <= self.sparsity_rate <= 1.0:
            raise UsageError(f"sparsity {self.sparsity_rate} outside [0, 1]")
        if self.flops < 0:
            raise UsageError("flops must be non-negative")

    def row(self) -> list[str]:
        return [self.tag, self.mode, self.perturb, f"{self.top1:.4f}", f"{self.drop_rate:.4f}",
                f"{self.flops / 1e6:.6f}", f"{self.sparsity_rate:.6f}"]


def records_to_csv(records: Iterable[MetricsRecord], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricsRecord]:
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise UsageError(f"unexpected CSV columns {header}")
    return [MetricsRecord(t, m, p, float(a), float(d), float(f) * 1e6, float(s))
            for t, m, p, a, d, f, s in reader]
