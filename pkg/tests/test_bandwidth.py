from fractions import Fraction

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from zebra.bandwidth import (
    KIB,
    MIB,
    LayerSpec,
    activation_storage,
    conv_flops,
    format_overhead_row,
    index_overhead,
    network_report,
    resnet18_layer_specs,
    to_jsonl,
    to_tsv,
    zebra_compute_overhead,
)
from zebra.errors import ShapeError

BASE = LayerSpec("l", C=64, H=32, W=32, F=3, O=64, s=1, block_size=4, bits=32)


def with_(**kw):
    d = dict(BASE.__dict__)
    d.update(kw)
    return LayerSpec(**d)


def test_activation_storage():
    assert activation_storage(BASE, 1.0) == 2_097_152
    assert activation_storage(BASE, 1.0) / 8 == 256 * KIB
    assert activation_storage(BASE, 0) == 0
    assert activation_storage(BASE, 0.5) == activation_storage(BASE, 1.0) / 2
    with pytest.raises(ValueError):
        activation_storage(BASE, 1.5)


def test_index_overhead():
    assert index_overhead(BASE) == 4096
    assert index_overhead(BASE) / 8 == 512
    assert index_overhead(with_(block_size=32)) == 64
    assert index_overhead(with_(block_size=8)) * 4 == index_overhead(with_(block_size=4))
    with pytest.raises(ShapeError):
        index_overhead(with_(block_size=3))


def test_conv_flops():
    assert conv_flops(BASE) == 37_748_736
    assert conv_flops(with_(s=2)) * 2 == conv_flops(BASE)


def test_layer_spec_validation():
    with pytest.raises(ShapeError):
        with_(O=0)
    with pytest.raises(ShapeError):
        with_(bits=12)


def test_compute_overhead():
    assert zebra_compute_overhead(BASE) == 65_536
    assert Fraction(zebra_compute_overhead(BASE), conv_flops(BASE)) == Fraction(1, 576)
    assert zebra_compute_overhead(LayerSpec("t", 1, 1, 1, 1, 1, 1, 1, 32)) == 1


def test_single_layer_report():
    layer = LayerSpec("one", C=1, H=4, W=4, F=3, O=1, s=1, block_size=4, bits=32)
    report = network_report([layer], [1.0])
    assert report.total.stored_bits == 512
    assert report.total.index_overhead_bits == 1


def test_all_zero_masks_report():
    layers = [BASE, with_(layer_id="m", C=8, H=8, W=8)]
    masks = [torch.zeros(64, 8, 8, dtype=torch.bool), torch.zeros(8, 2, 2, dtype=torch.bool)]
    report = network_report(layers, masks)
    assert report.total.stored_bits == 0
    assert report.total.reduced_percent_without_overhead == 100.0
    assert report.total.reduced_percent_with_overhead < 100.0


def test_report_from_masks_is_exact():
    mask = torch.zeros(64, 8, 8, dtype=torch.bool)
    mask.view(-1)[:1000] = True
    report = network_report([BASE], [mask])
    assert report.rows[0].stored_bits == 1000 * 16 * 32
    assert report.rows[0].retained_fraction == 1000 / 4096


def test_report_mask_shape_checked():
    with pytest.raises(ShapeError):
        network_report([BASE], [torch.ones(3, 8, 8, dtype=torch.bool)])


def test_report_keyed_by_layer_id():
    a, b = with_(layer_id="a"), with_(layer_id="b")
    assert network_report([a, b], {"b": 0.5}).rows[1].retained_fraction == 0.5
    assert network_report([a, b], {"b": 0.5}).rows[0].retained_fraction == 1.0


def test_empty_report_rejected():
    with pytest.raises(ValueError):
        network_report([])


def test_overhead_ratio_law():
    for block, bits in [(4, 32), (2, 16), (8, 8)]:
        layers = [LayerSpec(f"l{i}", 4 * (i + 1), 16, 16, 3, 8, 1, block, bits) for i in range(3)]
        report = network_report(layers)
        assert Fraction(report.total.index_overhead_bits, report.total.baseline_bits) == Fraction(1, block * block * bits)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=6), st.integers(1, 5))
def test_reports_are_additive(fractions, split):
    split = min(split, len(fractions) - 1)
    layers = [LayerSpec(f"l{i}", 2 + i, 8, 8, 3, 4, 1, 4, 32) for i in range(len(fractions))]
    whole = network_report(layers, fractions)
    left = network_report(layers[:split], fractions[:split])
    right = network_report(layers[split:], fractions[split:])
    merged = left.merge(right)
    assert whole.total == merged.total
    for field in ("baseline_bits", "index_overhead_bits"):
        assert getattr(whole.total, field) == getattr(left.total, field) + getattr(right.total, field)
    assert whole.total.stored_bits == pytest.approx(left.total.stored_bits + right.total.stored_bits, rel=1e-12)


def test_resnet18_per_layer_summation():
    specs = resnet18_layer_specs(32, 4, 32)
    assert len(specs) == 17
    # independent tally: image, then 16 conv inputs of the four stages
    elements = 3 * 32 * 32
    elements += 64 * 32 * 32  # stem output -> layer1
    elements += 3 * 64 * 32 * 32  # rest of layer1
    elements += 64 * 32 * 32 + 3 * 128 * 16 * 16  # layer2 reads layer1 output then its own maps
    elements += 128 * 16 * 16 + 3 * 256 * 8 * 8
    elements += 256 * 8 * 8 + 3 * 512 * 4 * 4
    report = network_report(specs)
    assert report.total.baseline_bits == elements * 32
    assert report.total.index_overhead_bits == elements // 16


def test_exports():
    report = network_report([BASE, with_(layer_id="x")], [0.5, 0.25])
    tsv = to_tsv(report).splitlines()
    assert tsv[0].split("\t")[0] == "layer_id" and len(tsv) == 4
    assert tsv[-1].startswith("total\t")
    jl = to_jsonl(report).splitlines()
    assert len(jl) == 3 and '"layer_id": "total"' in jl[-1]
    row = format_overhead_row(report, "M", "D")
    assert row.startswith("M\tD\t")
    assert f"{report.required_bytes / MIB:.2f} MB" in row
