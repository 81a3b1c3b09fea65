"""Static pruning applied before Zebra retraining.

* Magnitude weight pruning with a per-layer cutoff; masks are frozen during
  later training.
* Network Slimming: L1 sparsity on batch-norm scale factors, then removal of
  the channels with the globally smallest ``|gamma|``.

Ties at a cutoff are broken by ``(layer index, element index)`` so results are
deterministic.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import torch
from torch import nn

from .errors import ConfigError, TopologyError

METHODS = ("weight_pruning", "network_slimming")


@dataclass(frozen=True)
class PruneSpec:
    method: str
    ratio: float
    l1_coefficient: float = 1e-4
    pretrain_epochs: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"prune method must be one of {METHODS}, got {self.method!r}")
        _check_ratio(self.ratio)
        if self.l1_coefficient < 0:
            raise ConfigError("l1_coefficient must be >= 0")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_ratio(ratio: float) -> None:
    if not 0 <= ratio < 1:
        raise ConfigError(f"prune ratio must be in [0, 1), got {ratio}")


def _smallest(values: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` smallest entries, ties resolved by position."""
    order = torch.sort(values, stable=True).indices
    return order[:k]


def magnitude_prune(weights: Mapping[str, torch.Tensor], ratio: float) -> dict[str, torch.Tensor]:
    """Per-layer keep masks removing ``floor(ratio * numel)`` smallest-|w| entries."""
    _check_ratio(ratio)
    masks = {}
    for name, w in weights.items():
        flat = w.detach().abs().flatten()
        k = math.floor(ratio * flat.numel())
        keep = torch.ones(flat.numel(), dtype=torch.bool)
        keep[_smallest(flat, k)] = False
        masks[name] = keep.reshape(w.shape)
    return masks


def prunable_weights(model: nn.Module) -> dict[str, nn.Parameter]:
    """Convolution and classifier weights; threshold heads and BN are excluded."""
    out = {}
    for name, module in model.named_modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            out[f"{name}.weight"] = module.weight
    return out


def apply_weight_masks(model: nn.Module, masks: Mapping[str, torch.Tensor]) -> None:
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, m in masks.items():
            params[name].mul_(m.to(params[name].dtype))


def bn_l1_penalty(gammas, coefficient: float):
    """``coefficient * sum(|gamma|)`` over all given BN scale vectors."""
    if coefficient < 0:
        raise ValueError("coefficient must be >= 0")
    if isinstance(gammas, Mapping):
        gammas = list(gammas.values())
    total = sum(g.abs().sum() for g in gammas) if gammas else torch.zeros(())
    return coefficient * total


def slim_channels(gammas: Mapping[str, torch.Tensor], ratio: float) -> dict[str, torch.Tensor]:
    """Global smallest-|gamma| channel selection. Returns ``{layer_id: keep}``.

    Every layer keeps at least its largest-|gamma| channel, so slightly fewer
    than ``floor(ratio * total)`` channels may be removed.
    """
    _check_ratio(ratio)
    names = list(gammas)
    mags = [gammas[n].detach().abs().flatten().cpu() for n in names]
    if not mags:
        return {}
    flat = torch.cat(mags)
    k = math.floor(ratio * flat.numel())
    drop = torch.zeros(flat.numel(), dtype=torch.bool)
    drop[_smallest(flat, k)] = True

    keep, start = {}, 0
    for name, m in zip(names, mags):
        layer_keep = ~drop[start : start + m.numel()]
        start += m.numel()
        if not layer_keep.any():
            layer_keep[torch.argmax(m)] = True
        keep[name] = layer_keep
    return keep


def rebuild_slimmed_model(model, keep: Mapping[str, torch.Tensor]):
    """Smaller copy of ``model`` keeping only the selected channels.

    ``model`` must implement ``slimmed(keep)``; see :mod:`zebra.harness.models`.
    """
    if not hasattr(model, "slimmed"):
        raise TopologyError(f"{type(model).__name__} does not support channel slimming")
    for name, k in keep.items():
        if not k.any():
            raise TopologyError(f"channel mask for {name!r} removes every channel")
    return model.slimmed(keep)
