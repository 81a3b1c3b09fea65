"""Zero-block gating with learned per-channel thresholds.

During training each gated layer owns a :class:`ThresholdHead` (global average
pooling followed by a square fully-connected layer) that predicts one threshold
per channel. Blocks whose maximum does not exceed their channel's threshold are
zeroed. The heads are trained only through :func:`regularization_loss`, which
pulls every threshold toward ``t_obj``; after training the heads are dropped and
the constant ``t_obj`` is used instead (:func:`fold_for_inference`).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from . import blockgrid
from .errors import ConfigError, ShapeError

GATE_MODES = ("hard", "soft")


@dataclass(frozen=True)
class ZebraConfig:
    block_size: int = 4
    t_obj: float = 0.1
    lambda_ce: float = 1.0
    gate_mode: str = "hard"
    soft_temperature: float = 0.01

    def __post_init__(self):
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if self.t_obj < 0:
            raise ConfigError(f"t_obj must be >= 0, got {self.t_obj}")
        if self.lambda_ce <= 0:
            raise ConfigError(f"lambda_ce must be > 0, got {self.lambda_ce}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.soft_temperature <= 0:
            raise ConfigError(f"soft_temperature must be > 0, got {self.soft_temperature}")

    def to_dict(self) -> dict:
        return asdict(self)


class ThresholdHead(nn.Module):
    """GAP + fully-connected layer mapping a ``C``-channel map to ``C`` thresholds.

    Initialised at the regularizer's fixed point: zero weights, bias ``t_obj``.
    Parameters are created directly so construction consumes no RNG state.
    """

    def __init__(self, channels: int, t_obj: float, layer_id: str = ""):
        super().__init__()
        self.layer_id = layer_id
        self.weight = nn.Parameter(torch.zeros(channels, channels))
        self.bias = nn.Parameter(torch.full((channels,), float(t_obj)))

    @property
    def channels(self) -> int:
        return self.bias.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return threshold_head_forward(x, self)


def threshold_head_forward(x: torch.Tensor, head: ThresholdHead) -> torch.Tensor:
    """``W @ gap(x) + b`` for ``x`` of shape ``[C, H, W]`` or ``[N, C, H, W]``."""
    if x.dim() < 3 or x.shape[-3] != head.channels:
        raise ShapeError(
            f"head {head.layer_id!r} expects {head.channels} channels, got map {tuple(x.shape)}"
        )
    pooled = x.mean(dim=(-2, -1))
    return pooled @ head.weight.T + head.bias


def zebra_gate(
    x: torch.Tensor, thresholds: torch.Tensor, cfg: ZebraConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gate ``x`` blockwise. Returns ``(gated_map, keep_mask)``.

    Hard mode: the mask is a non-differentiable comparison, so activations in
    kept blocks get gradient 1, pruned ones 0, and thresholds get none.
    Soft mode: every block is scaled by ``sigmoid((max - T) / temperature)``;
    gradients reach both activations and thresholds. A block counts as pruned
    when its factor is <= 0.5.
    """
    layout = blockgrid.make_layout(x.shape[-2], x.shape[-1], cfg.block_size)
    if thresholds.shape[-1] != x.shape[-3]:
        raise ShapeError(
            f"{thresholds.shape[-1]} thresholds for a {x.shape[-3]}-channel map"
        )
    if cfg.gate_mode == "hard":
        with torch.no_grad():
            mask = blockgrid.mask_from_thresholds(
                blockgrid.block_max(x, layout), thresholds.to(x.dtype)
            )
        return blockgrid.apply_mask(x, mask, layout), mask

    stats = blockgrid.block_max(x, layout)
    factor = torch.sigmoid((stats - thresholds[..., None, None]) / cfg.soft_temperature)
    gated = x * blockgrid.expand_mask(factor, layout)
    return gated, (factor > 0.5).detach()


def regularization_loss(all_thresholds: Sequence[torch.Tensor], t_obj: float) -> torch.Tensor:
    """Sum of ``(t_obj - T)^2`` over every layer and channel.

    Batched thresholds (``[N, C]``) are summed per image and averaged over the batch.
    """
    total = None
    for t in all_thresholds:
        sq = (t_obj - t) ** 2
        term = sq.sum(dim=-1).mean() if sq.dim() > 1 else sq.sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def total_loss(ce_loss, reg_loss, cfg: ZebraConfig):
    return cfg.lambda_ce * ce_loss + reg_loss


class ZebraGate(nn.Module):
    """Gate module placed after an activation function.

    Holds the per-layer state: the head (training mode only), the last
    thresholds and the last block mask. ``mode`` is ``"training"`` (thresholds
    from the head) or ``"inference"`` (constant ``t_obj``, no head).
    """

    def __init__(self, channels: int, cfg: ZebraConfig | None, layer_id: str = ""):
        super().__init__()
        self.layer_id = layer_id
        self.channels = channels
        self.cfg = cfg
        self.enabled = cfg is not None
        self.mode = "training"
        self.head = ThresholdHead(channels, cfg.t_obj if cfg else 0.0, layer_id)
        self.thresholds: torch.Tensor | None = None
        self.last_mask: torch.Tensor | None = None
        # graph-connected thresholds of the most recent forward, for the regularizer
        self.live_thresholds: torch.Tensor | None = None

    def current_thresholds(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "inference":
            return torch.full((self.channels,), self.cfg.t_obj, dtype=x.dtype, device=x.device)
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            self.last_mask = None
            return x
        t = self.current_thresholds(x)
        cfg = self.cfg
        if self.mode == "inference" and cfg.gate_mode != "hard":
            # deployment gating is always the hard comparison
            cfg = ZebraConfig(cfg.block_size, cfg.t_obj, cfg.lambda_ce, "hard")
        out, mask = zebra_gate(x, t, cfg)
        self.live_thresholds = t if self.mode == "training" else None
        self.thresholds = t.detach()
        self.last_mask = mask
        return out

    def extra_repr(self) -> str:
        return f"channels={self.channels}, layer_id={self.layer_id!r}, mode={self.mode}"


def fold_for_inference(gates: Iterable[ZebraGate], cfg: ZebraConfig | None = None) -> list[ZebraGate]:
    """Drop every threshold head and switch the gates to constant ``t_obj``."""
    folded = []
    for gate in gates:
        c = cfg or gate.cfg
        if c is not None:
            gate.cfg = c
        gate.mode = "inference"
        gate.head = None
        gate.live_thresholds = None
        if c is not None:
            gate.thresholds = torch.full((gate.channels,), c.t_obj)
        folded.append(gate)
    return folded
