"""Zero-block overlays: darken each image region by the share of channels whose
block there was pruned."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError

ALPHA = 0.8


def darkness_grid(mask: torch.Tensor) -> np.ndarray:
    """Fraction of channels whose block ``(i, j)`` is zeroed, for a ``[C, bh, bw]`` mask."""
    m = torch.as_tensor(mask).bool()
    if m.dim() != 3:
        raise ValueError(f"expected a single-image [C, bh, bw] mask, got {tuple(m.shape)}")
    return (~m).double().mean(dim=0).numpy()


def upscale_nearest(grid: np.ndarray, H: int, W: int) -> np.ndarray:
    rows = (np.arange(H) * grid.shape[0]) // H
    cols = (np.arange(W) * grid.shape[1]) // W
    return grid[rows[:, None], cols[None, :]]


def overlay_array(image, mask, alpha: float = ALPHA) -> np.ndarray:
    """``image * (1 - alpha * darkness)`` as an ``[H, W, 3]`` uint8 array.

    ``image`` is ``[3, H, W]`` with values in ``[0, 1]``.
    """
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    d = upscale_nearest(darkness_grid(mask), img.shape[1], img.shape[2])
    out = img * (1.0 - alpha * d)[None]
    return np.round(out * 255).astype(np.uint8).transpose(1, 2, 0)


def _safe_name(layer_id: str) -> str:
    return layer_id.replace("/", "_").replace(".", "_")


def render_overlay(
    image,
    masks: Mapping[str, torch.Tensor],
    layers: Sequence[str] | None = None,
    out_dir=".",
    alpha: float = ALPHA,
) -> list[Path]:
    """Write one PNG per selected gated layer. Returns the written paths."""
    layers = list(masks) if layers is None else list(layers)
    missing = [name for name in layers if name not in masks]
    if missing:
        raise ConfigError(f"layer(s) not gated: {missing}; gated layers are {sorted(masks)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in layers:
        path = out_dir / f"{_safe_name(name)}.png"
        Image.fromarray(overlay_array(image, masks[name], alpha)).save(path, format="PNG")
        paths.append(path)
    return paths


def load_image(path) -> np.ndarray:
    """Read an RGB image file as ``[3, H, W]`` floats in ``[0, 1]``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)
