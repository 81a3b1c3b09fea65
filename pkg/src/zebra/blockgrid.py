"""Partitioning of activation maps into non-overlapping square spatial blocks.

All functions accept tensors shaped ``[..., C, H, W]``; leading batch dims are
carried through. Masks and stats are shaped ``[..., C, blocks_h, blocks_w]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError


@dataclass(frozen=True)
class BlockGridLayout:
    block_size: int
    blocks_h: int
    blocks_w: int
    effective_block_size: int

    @property
    def height(self) -> int:
        return self.blocks_h * self.effective_block_size

    @property
    def width(self) -> int:
        return self.blocks_w * self.effective_block_size

    @property
    def n_blocks(self) -> int:
        return self.blocks_h * self.blocks_w


def make_layout(H: int, W: int, block_size: int) -> BlockGridLayout:
    """Layout for an ``H x W`` map; the block shrinks to ``min(block_size, H, W)``."""
    if min(H, W, block_size) < 1:
        raise ShapeError(f"H, W and block_size must be >= 1, got {H}, {W}, {block_size}")
    s = min(block_size, H, W)
    if H % s or W % s:
        raise ShapeError(f"map {H}x{W} is not divisible by effective block size {s}")
    return BlockGridLayout(block_size, H // s, W // s, s)


def check_activation(x: torch.Tensor) -> None:
    if x.dim() < 3 or min(x.shape[-3:]) < 1:
        raise ShapeError(f"activation map must be [..., C, H, W], got {tuple(x.shape)}")
    if x.is_floating_point() and not bool(torch.isfinite(x).all()):
        raise ValueError("activation map contains non-finite values")


def _check_map(x: torch.Tensor, layout: BlockGridLayout) -> None:
    if x.dim() < 3 or x.shape[-2:] != (layout.height, layout.width):
        raise ShapeError(
            f"map of shape {tuple(x.shape)} does not match a "
            f"{layout.height}x{layout.width} layout"
        )


def block_max(x: torch.Tensor, layout: BlockGridLayout) -> torch.Tensor:
    _check_map(x, layout)
    s = layout.effective_block_size
    blocks = x.reshape(*x.shape[:-2], layout.blocks_h, s, layout.blocks_w, s)
    return blocks.amax(dim=(-3, -1))


def mask_from_thresholds(stats: torch.Tensor, thresholds: torch.Tensor) -> torch.Tensor:
    """Keep a block iff its max is strictly above its channel's threshold.

    ``thresholds`` is ``[C]`` or batched ``[..., C]`` matching the stats' leading dims.
    """
    C = stats.shape[-3]
    if thresholds.dim() == 0 or thresholds.shape[-1] != C:
        raise ShapeError(f"expected {C} thresholds, got shape {tuple(thresholds.shape)}")
    return stats > thresholds[..., None, None]


def expand_mask(mask: torch.Tensor, layout: BlockGridLayout) -> torch.Tensor:
    """Upsample a block-level tensor to element resolution."""
    s = layout.effective_block_size
    return mask.repeat_interleave(s, dim=-2).repeat_interleave(s, dim=-1)


def apply_mask(x: torch.Tensor, mask: torch.Tensor, layout: BlockGridLayout) -> torch.Tensor:
    _check_map(x, layout)
    if mask.shape[-2:] != (layout.blocks_h, layout.blocks_w) or mask.shape[-3] != x.shape[-3]:
        raise ShapeError(f"mask {tuple(mask.shape)} incompatible with map {tuple(x.shape)}")
    keep = expand_mask(mask.bool(), layout)
    # where() rather than multiply: pruned elements must be +0.0, never -0.0
    return torch.where(keep, x, torch.zeros((), dtype=x.dtype, device=x.device))


def zero_block_fraction(mask: torch.Tensor) -> float:
    if mask.numel() == 0:
        return 0.0
    return float((~mask.bool()).sum().item()) / mask.numel()
