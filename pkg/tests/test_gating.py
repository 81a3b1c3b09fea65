import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from zebra.blockgrid import block_max, make_layout
from zebra.errors import ConfigError, ShapeError
from zebra.gating import (
    ThresholdHead,
    ZebraConfig,
    ZebraGate,
    fold_for_inference,
    regularization_loss,
    threshold_head_forward,
    total_loss,
    zebra_gate,
)

from .fd import central_difference, max_relative_error


def test_config_validation():
    with pytest.raises(ConfigError):
        ZebraConfig(t_obj=-0.1)
    with pytest.raises(ConfigError):
        ZebraConfig(lambda_ce=0)
    with pytest.raises(ConfigError):
        ZebraConfig(gate_mode="fuzzy")
    with pytest.raises(ConfigError):
        ZebraConfig(soft_temperature=0)


def test_head_initialisation_is_regularizer_fixed_point():
    head = ThresholdHead(4, 0.3)
    assert torch.equal(head.weight, torch.zeros(4, 4))
    assert torch.equal(head.bias, torch.full((4,), 0.3))
    # no RNG consumed
    torch.manual_seed(1)
    a = torch.rand(1)
    torch.manual_seed(1)
    ThresholdHead(16, 0.1)
    assert torch.equal(torch.rand(1), a)


def test_head_bias_passthrough():
    head = ThresholdHead(2, 0.5)
    assert torch.allclose(threshold_head_forward(torch.rand(2, 4, 4), head), torch.tensor([0.5, 0.5]))


def test_head_identity_on_constant_map():
    head = ThresholdHead(3, 0.0)
    with torch.no_grad():
        head.weight.copy_(torch.eye(3))
    out = threshold_head_forward(torch.full((3, 8, 8), 0.2), head)
    assert torch.allclose(out, torch.full((3,), 0.2))


def test_head_matches_hand_rolled_matvec():
    C, H, W = 4, 6, 6
    head = ThresholdHead(C, 0.0)
    with torch.no_grad():
        head.weight.copy_(torch.randn(C, C))
        head.bias.copy_(torch.randn(C))
    x = torch.rand(C, H, W, dtype=torch.float32)
    gap = [sum(x[c, i, j].item() for i in range(H) for j in range(W)) / (H * W) for c in range(C)]
    expected = [
        sum(head.weight[r, c].item() * gap[c] for c in range(C)) + head.bias[r].item() for r in range(C)
    ]
    assert torch.allclose(threshold_head_forward(x, head), torch.tensor(expected), atol=1e-5)
    batched = threshold_head_forward(x[None].repeat(3, 1, 1, 1), head)
    assert batched.shape == (3, C)


def test_head_channel_mismatch():
    with pytest.raises(ShapeError):
        threshold_head_forward(torch.rand(3, 4, 4), ThresholdHead(4, 0.1))


def test_gate_noop_below_minimum():
    x = torch.rand(3, 8, 8) + 0.1
    out, mask = zebra_gate(x, torch.zeros(3), ZebraConfig(block_size=4))
    assert torch.equal(out, x)
    assert mask.all()


def test_gate_target_half_example():
    # one channel, two blocks: max 0.3 is pruned at threshold 0.5, max 0.8 survives
    x = torch.zeros(1, 4, 8)
    x[0, :, :4] = 0.1
    x[0, 1, 2] = 0.3
    x[0, :, 4:] = 0.2
    x[0, 3, 7] = 0.8
    out, mask = zebra_gate(x, torch.tensor([0.5]), ZebraConfig(block_size=4, t_obj=0.5))
    assert mask.tolist() == [[[False, True]]]
    assert torch.equal(out[0, :, :4], torch.zeros(4, 4))
    assert torch.equal(out[0, :, 4:], x[0, :, 4:])


def test_gate_shape_mismatch():
    with pytest.raises(ShapeError):
        zebra_gate(torch.rand(3, 8, 8), torch.zeros(2), ZebraConfig())
    with pytest.raises(ShapeError):
        zebra_gate(torch.rand(3, 6, 6), torch.zeros(3), ZebraConfig(block_size=4))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_soft_gate_agrees_with_hard_away_from_threshold(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(4, 8, 8, generator=g)
    t = torch.rand(4, generator=g)
    layout = make_layout(8, 8, 4)
    margin = (block_max(x, layout) - t[:, None, None]).abs()
    hard_out, hard_mask = zebra_gate(x, t, ZebraConfig(block_size=4))
    soft_out, soft_mask = zebra_gate(x, t, ZebraConfig(block_size=4, gate_mode="soft", soft_temperature=1e-6))
    ok = margin >= 1e-3
    assert torch.equal(hard_mask[ok], soft_mask[ok])
    # pointwise convergence of the gated values on blocks with margin
    elem_ok = ok.repeat_interleave(4, 1).repeat_interleave(4, 2)
    assert torch.allclose(soft_out[elem_ok], hard_out[elem_ok], atol=1e-6)


def test_hard_gate_gradient_pattern():
    x = torch.rand(2, 3, 8, 8, requires_grad=True)
    t = torch.full((3,), 0.9, requires_grad=True)
    out, mask = zebra_gate(x, t, ZebraConfig(block_size=4))
    out.sum().backward()
    keep = mask.repeat_interleave(4, -2).repeat_interleave(4, -1)
    assert torch.equal(x.grad, keep.float())
    assert t.grad is None


def test_soft_gate_gradients_reach_thresholds():
    x = torch.rand(3, 8, 8, requires_grad=True)
    t = torch.full((3,), 0.5, requires_grad=True)
    out, _ = zebra_gate(x, t, ZebraConfig(block_size=4, gate_mode="soft", soft_temperature=0.1))
    out.sum().backward()
    assert t.grad is not None and t.grad.abs().sum() > 0
    assert x.grad.abs().sum() > 0


def test_regularization_loss_examples():
    assert regularization_loss([torch.full((3,), 0.5), torch.full((2,), 0.5)], 0.5).item() == 0.0
    assert regularization_loss([torch.tensor([0.4, 0.6], dtype=torch.float64)], 0.5).item() == pytest.approx(0.02, abs=1e-15)
    assert regularization_loss([torch.tensor([0.0])], 0.5).item() == 0.25


def test_regularization_loss_batched_is_mean_of_per_image_sums():
    t = torch.tensor([[0.4, 0.6], [0.5, 0.3]], dtype=torch.float64)
    assert regularization_loss([t], 0.5).item() == pytest.approx((0.02 + 0.04) / 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1024), min_size=1, max_size=8), st.integers(0, 1024))
def test_regularization_loss_zero_iff_converged(values, t_obj):
    # a 1/1024 grid keeps squared deviations clear of float underflow
    values, t_obj = [v / 1024 for v in values], t_obj / 1024
    loss = regularization_loss([torch.tensor(values, dtype=torch.float64)], t_obj).item()
    assert (loss == 0.0) == all(v == t_obj for v in values)


def test_total_loss():
    assert total_loss(0.7, 0.02, ZebraConfig(lambda_ce=1)) == pytest.approx(0.72)
    assert total_loss(0.1, 0.0, ZebraConfig(lambda_ce=10)) == pytest.approx(1.0)
    assert total_loss(0.42, 0.0, ZebraConfig(lambda_ce=1)) == 0.42
    cfg = ZebraConfig(lambda_ce=3.5)
    slope = total_loss(1.0, 0.2, cfg) - total_loss(0.0, 0.2, cfg)
    assert slope == pytest.approx(3.5)


def test_regularizer_gradient_against_finite_differences():
    torch.manual_seed(3)
    head = ThresholdHead(5, 0.2).double()
    with torch.no_grad():
        head.weight.normal_(0, 0.3)
        head.bias.normal_(0.2, 0.1)
    x = torch.rand(4, 5, 8, 8, dtype=torch.float64)

    def loss():
        return regularization_loss([head(x)], 0.2)

    head.zero_grad()
    loss().backward()
    for p in (head.bias, head.weight):
        fd = central_difference(loss, p, 1e-4)
        assert max_relative_error(p.grad, fd) < 1e-4


def test_gate_module_training_and_fold():
    cfg = ZebraConfig(block_size=4, t_obj=0.5)
    gate = ZebraGate(3, cfg, "g")
    x = torch.rand(2, 3, 8, 8)
    out_train = gate(x)
    assert gate.live_thresholds is not None and gate.live_thresholds.shape == (2, 3)
    train_mask = gate.last_mask.clone()
    fold_for_inference([gate], cfg)
    assert gate.mode == "inference" and gate.head is None
    assert torch.equal(gate.thresholds, torch.full((3,), 0.5))
    out_inf = gate(x)
    # heads at their initial fixed point produce t_obj exactly, so masks agree
    assert torch.equal(gate.last_mask, train_mask)
    assert torch.equal(out_inf, out_train)
    assert gate.live_thresholds is None


def test_fold_at_zero_prunes_only_natural_zero_blocks():
    cfg = ZebraConfig(block_size=2, t_obj=0.0)
    gate = ZebraGate(2, cfg)
    fold_for_inference([gate])
    x = torch.rand(2, 4, 4)
    x[0, :2, :2] = 0
    out = gate(x)
    assert torch.equal(out, x)
    assert gate.last_mask.tolist() == [[[False, True], [True, True]], [[True, True], [True, True]]]


def test_disabled_gate_is_identity():
    gate = ZebraGate(3, None)
    x = torch.randn(1, 3, 4, 4)
    assert gate(x) is x
