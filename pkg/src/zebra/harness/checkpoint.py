"""Checkpoint container.

Checkpoints are safetensors files: an 8-byte little-endian header length, a
JSON manifest giving every tensor's dtype, shape and byte offsets, then the raw
little-endian tensor data. Tensor names:

``zebra/<layer_id>/fc_weights``  F32 ``[C, C]`` threshold-head weights (row-major)
``zebra/<layer_id>/fc_bias``     F32 ``[C]``
``model/<param>``                remaining model parameters and buffers
``prune/<param>``                U8 weight-pruning keep masks (1 = kept)

String metadata in the manifest: ``format`` (``zebra-checkpoint``), ``version``,
``config`` (experiment config as JSON, including the Zebra config),
``arch`` (JSON architecture, with slimmed widths), ``zebra_layers`` (JSON list
of ``{layer_id, C, mode}``) and ``folded`` (``"0"``/``"1"``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from ..errors import CheckpointError
from ..gating import fold_for_inference
from .config import ExperimentConfig
from .models import ZebraNet, build_from_arch

FORMAT = "zebra-checkpoint"
VERSION = "1"


@dataclass
class Checkpoint:
    config: ExperimentConfig
    model: ZebraNet
    weight_masks: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def folded(self) -> bool:
        return all(g.mode == "inference" for g in self.model.gates() if g.cfg is not None)


def fold_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    fold_for_inference([g for g in ckpt.model.gates() if g.cfg is not None], ckpt.config.zebra)
    return ckpt


def _head_key(name: str) -> tuple[str, str] | None:
    for suffix, label in ((".head.weight", "fc_weights"), (".head.bias", "fc_bias")):
        if name.endswith(suffix):
            return name[: -len(suffix)], label
    return None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = {}
    for name, t in ckpt.model.state_dict().items():
        head = _head_key(name)
        key = f"zebra/{head[0]}/{head[1]}" if head else f"model/{name}"
        tensors[key] = t.detach().contiguous().clone()
    for name, m in ckpt.weight_masks.items():
        tensors[f"prune/{name}"] = m.to(torch.uint8).contiguous()
    layers = [{"layer_id": g.layer_id, "C": g.channels, "mode": g.mode} for g in ckpt.model.gates()]
    metadata = {
        "format": FORMAT,
        "version": VERSION,
        "config": json.dumps(ckpt.config.to_dict()),
        "arch": json.dumps(ckpt.model.arch),
        "zebra_layers": json.dumps(layers),
        "folded": "1" if ckpt.folded else "0",
    }
    save_file(tensors, str(path), metadata=metadata)


def load_checkpoint(path) -> Checkpoint:
    try:
        from safetensors import safe_open

        with safe_open(str(path), "pt") as f:
            metadata = f.metadata() or {}
        tensors = load_file(str(path))
    except (OSError, SafetensorError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if metadata.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a zebra checkpoint")
    if metadata.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {metadata.get('version')}")

    cfg = ExperimentConfig.from_dict(json.loads(metadata["config"]))
    model = build_from_arch(json.loads(metadata["arch"]), cfg.zebra)
    gates = {g.layer_id: g for g in model.gates()}
    for entry in json.loads(metadata["zebra_layers"]):
        gate = gates.get(entry["layer_id"])
        if gate is None or gate.channels != entry["C"]:
            raise CheckpointError(f"{path}: gate {entry['layer_id']!r} does not match the architecture")
        if entry["mode"] == "inference":
            fold_for_inference([gate], cfg.zebra)

    state, masks = {}, {}
    for key, t in tensors.items():
        group, _, rest = key.partition("/")
        if group == "model":
            state[rest] = t
        elif group == "zebra":
            layer_id, _, label = rest.rpartition("/")
            state[f"{layer_id}.head.{'weight' if label == 'fc_weights' else 'bias'}"] = t
        elif group == "prune":
            masks[rest] = t.bool()
        else:
            raise CheckpointError(f"{path}: unexpected tensor {key!r}")
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: tensors do not match the architecture: {e}") from e
    model.eval()
    return Checkpoint(cfg, model, masks)
