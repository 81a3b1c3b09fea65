"""Analytic activation-map bandwidth accounting.

A :class:`LayerSpec` describes one convolution together with the activation
map it reads: a ``C x H x W`` map of ``bits``-wide elements, consumed by an
``F x F`` kernel with ``O`` output channels and stride ``s``. Every quantity
below is a function of that map, matching the per-layer DRAM traffic of a
layer-by-layer accelerator.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from numbers import Real
from typing import Mapping, Sequence

import torch

from .errors import ShapeError

KIB = 1024
MIB = 1024 * 1024
ALLOWED_BITS = (8, 16, 32)


@dataclass(frozen=True)
class LayerSpec:
    layer_id: str
    C: int
    H: int
    W: int
    F: int
    O: int
    s: int = 1
    block_size: int = 4
    bits: int = 32

    def __post_init__(self):
        for name in ("C", "H", "W", "F", "O", "s", "block_size"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{self.layer_id}: {name} must be positive")
        if self.bits not in ALLOWED_BITS:
            raise ShapeError(f"{self.layer_id}: bits must be one of {ALLOWED_BITS}, got {self.bits}")

    @property
    def elements(self) -> int:
        return self.C * self.H * self.W

    @property
    def n_blocks(self) -> int:
        return self.elements // (self.block_size**2)


def activation_storage(layer: LayerSpec, S: Real) -> Real:
    """Bits needed for the map when a fraction ``S`` of it is retained."""
    if not 0 <= S <= 1:
        raise ValueError(f"retained fraction must be in [0, 1], got {S}")
    return layer.elements * layer.bits * S


def index_overhead(layer: LayerSpec) -> int:
    """One bit per block."""
    b = layer.block_size
    if layer.H % b or layer.W % b:
        raise ShapeError(f"{layer.layer_id}: block {b} does not divide {layer.H}x{layer.W}")
    return layer.elements // (b * b)


def conv_flops(layer: LayerSpec):
    """``C*W*H*F*F*O / s``. The division by ``s`` (not ``s**2``) is deliberate."""
    n = layer.elements * layer.F * layer.F * layer.O
    return n // layer.s if n % layer.s == 0 else n / layer.s


def zebra_compute_overhead(layer: LayerSpec) -> int:
    """One max-update per element."""
    return layer.elements


@dataclass
class LayerRow:
    layer_id: str
    baseline_bits: int
    retained_fraction: float
    stored_bits: float
    index_overhead_bits: int
    reduced_percent_with_overhead: float
    reduced_percent_without_overhead: float


def _reduction(baseline, stored, index) -> tuple[float, float]:
    if baseline == 0:
        return 0.0, 0.0
    return (
        float(100 * (1 - Fraction(stored + index) / baseline)),
        float(100 * (1 - Fraction(stored) / baseline)),
    )


@dataclass
class BandwidthReport:
    rows: list[LayerRow]
    total: LayerRow = field(init=False)

    def __post_init__(self):
        self.total = _total_row(self.rows)

    @property
    def required_bytes(self) -> float:
        return self.total.baseline_bits / 8

    @property
    def index_bytes(self) -> float:
        return self.total.index_overhead_bits / 8

    @property
    def overhead_ratio(self) -> float:
        return self.total.index_overhead_bits / self.total.baseline_bits

    def merge(self, other: "BandwidthReport") -> "BandwidthReport":
        return BandwidthReport(self.rows + other.rows)


def _total_row(rows: Sequence[LayerRow]) -> LayerRow:
    baseline = sum(r.baseline_bits for r in rows)
    stored = sum(Fraction(r.stored_bits) for r in rows)
    index = sum(r.index_overhead_bits for r in rows)
    with_oh, without_oh = _reduction(baseline, stored, index)
    return LayerRow(
        layer_id="total",
        baseline_bits=baseline,
        retained_fraction=float(stored / baseline) if baseline else 0.0,
        stored_bits=float(stored),
        index_overhead_bits=index,
        reduced_percent_with_overhead=with_oh,
        reduced_percent_without_overhead=without_oh,
    )


def retained_from_mask(mask: torch.Tensor) -> Fraction:
    """Exact kept-block fraction of a (possibly batched) block mask."""
    m = mask.bool()
    return Fraction(int(m.sum().item()), m.numel())


def network_report(
    layers: Sequence[LayerSpec],
    retained: Sequence | Mapping[str, object] | None = None,
) -> BandwidthReport:
    """Per-layer and total accounting.

    ``retained`` gives, per layer (in order, or keyed by ``layer_id``), either a
    block mask tensor or a retained fraction. ``None`` means nothing is pruned.
    Percentages in the report are in ``[0, 100]``.
    """
    if not layers:
        raise ValueError("network_report needs at least one layer")
    rows = []
    for i, layer in enumerate(layers):
        if retained is None:
            r = None
        elif isinstance(retained, Mapping):
            r = retained.get(layer.layer_id)
        else:
            r = retained[i]
        if r is None:
            S = Fraction(1)
        elif isinstance(r, torch.Tensor):
            if r.shape[-3] != layer.C or r.shape[-2] * r.shape[-1] * layer.block_size**2 != layer.H * layer.W:
                raise ShapeError(f"{layer.layer_id}: mask {tuple(r.shape)} does not match layer")
            S = retained_from_mask(r)
        else:
            S = Fraction(r)
        baseline = layer.elements * layer.bits
        stored = activation_storage(layer, S)
        index = index_overhead(layer)
        with_oh, without_oh = _reduction(baseline, stored, index)
        rows.append(LayerRow(layer.layer_id, baseline, float(S), float(stored), index, with_oh, without_oh))
    return BandwidthReport(rows)


REPORT_FIELDS = [
    "layer_id",
    "baseline_bits",
    "retained_fraction",
    "stored_bits",
    "index_overhead_bits",
    "reduced_percent_with_overhead",
    "reduced_percent_without_overhead",
]


def to_tsv(report: BandwidthReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, delimiter="\t", lineterminator="\n")
    writer.writeheader()
    for row in report.rows + [report.total]:
        writer.writerow(asdict(row))
    return buf.getvalue()


def to_jsonl(report: BandwidthReport) -> str:
    return "".join(json.dumps(asdict(row)) + "\n" for row in report.rows + [report.total])


def format_overhead_row(report: BandwidthReport, model: str = "", dataset: str = "") -> str:
    """One line in the style of a required-bandwidth / overhead summary table."""
    required = report.required_bytes / MIB
    overhead = report.index_bytes / KIB
    return (
        f"{model}\t{dataset}\t{required:.2f} MB\t"
        f"{overhead:.2f} KB ({100 * report.overhead_ratio:.2f}%)"
    )


def resnet18_layer_specs(
    input_size: int = 32,
    block_size: int = 4,
    bits: int = 32,
    in_channels: int = 3,
) -> list[LayerSpec]:
    """Main-path convolutions of a CIFAR-style ResNet-18 and the maps they read.

    The 3x3 stride-1 stem keeps full resolution (no max-pool). The 1x1
    projection shortcuts read the same map as their block's first conv and
    are not listed separately.
    """
    specs = []

    def add(layer_id, C, H, F, O, s):
        b = min(block_size, H)
        specs.append(LayerSpec(layer_id, C, H, H, F, O, s, b, bits))

    add("conv1", in_channels, input_size, 3, 64, 1)
    channels, size = 64, input_size
    for stage, (width, stride) in enumerate([(64, 1), (128, 2), (256, 2), (512, 2)], start=1):
        for blk in range(2):
            s = stride if blk == 0 else 1
            add(f"layer{stage}.{blk}.conv1", channels, size, 3, width, s)
            size //= s
            add(f"layer{stage}.{blk}.conv2", width, size, 3, width, 1)
            channels = width
    return specs
