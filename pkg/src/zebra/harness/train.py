"""Training and evaluation loops."""
from __future__ import annotations

import json
import logging
import math
import random
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..bandwidth import network_report
from ..errors import CheckpointError, ConfigError, DivergenceError
from ..gating import regularization_loss, total_loss
from ..pruning import (
    apply_weight_masks,
    bn_l1_penalty,
    magnitude_prune,
    prunable_weights,
    rebuild_slimmed_model,
    slim_channels,
)
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import Dataset, load_dataset
from .models import ZebraNet, build_named, layer_specs

log = logging.getLogger(__name__)


def seed_everything(seed: int, num_threads: int = 1) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True)


def build_model(cfg: ExperimentConfig) -> ZebraNet:
    num_classes = 10 if cfg.dataset == "cifar10" else cfg.data.num_classes
    model = build_named(cfg.model, cfg.zebra, 3, num_classes)
    # fails early on map sizes the block grid cannot tile
    layer_specs(model, cfg.input_size, cfg.zebra.block_size if cfg.zebra else 1, cfg.bits)
    return model


def _make_optimizer(model: ZebraNet, cfg: ExperimentConfig, epochs: int):
    opt_cfg = cfg.optimizer
    head_params = {id(p) for g in model.gates() if g.head is not None for p in g.head.parameters()}
    heads = [p for p in model.parameters() if id(p) in head_params]
    rest = [p for p in model.parameters() if id(p) not in head_params]
    # heads are driven by the regularizer alone; no weight decay on them
    opt = torch.optim.SGD(
        [{"params": rest, "weight_decay": opt_cfg.weight_decay}, {"params": heads, "weight_decay": 0.0}],
        lr=opt_cfg.initial_lr,
        momentum=opt_cfg.momentum,
    )
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, opt_cfg.milestones(epochs), opt_cfg.decay_factor)
    return opt, sched


def _batches(n: int, batch_size: int, generator: torch.Generator | None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _train_epoch(model, data: Dataset, opt, cfg: ExperimentConfig, gen, *, use_zebra, l1_coefficient=0.0, weight_masks=None):
    model.train()
    gates = model.gates()
    zcfg = cfg.zebra
    ce_sum, reg_sum, n = 0.0, 0.0, 0
    for step, idx in enumerate(_batches(len(data.train_y), cfg.batch_size, gen)):
        x, y = data.train_x[idx], data.train_y[idx]
        ce = F.cross_entropy(model(x), y)
        if use_zebra:
            reg = regularization_loss([g.live_thresholds for g in gates if g.live_thresholds is not None], zcfg.t_obj)
            loss = total_loss(ce, reg, zcfg)
        else:
            reg = torch.zeros(())
            loss = ce
        if l1_coefficient:
            loss = loss + bn_l1_penalty(list(b.weight for b in model.prunable_bns().values()), l1_coefficient)
        if not math.isfinite(loss.item()):
            raise DivergenceError(
                f"non-finite loss at step {step}: ce={ce.item()}, reg={reg.item()}, "
                f"lr={opt.param_groups[0]['lr']}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if weight_masks:
            apply_weight_masks(model, weight_masks)
        ce_sum += ce.item() * len(idx)
        reg_sum += reg.item() * len(idx)
        n += len(idx)
    return ce_sum / max(n, 1), reg_sum / max(n, 1)


def measure(model: ZebraNet, x: torch.Tensor, y: torch.Tensor, cfg: ExperimentConfig, batch_size=256, keep_masks=False):
    """Accuracy, zero-block statistics and bandwidth over a fixed set.

    Gates run in whatever mode they are in; thresholds from heads are per image.
    """
    model.eval()
    gates = model.gates()
    kept = [0] * len(gates)
    total = [0] * len(gates)
    masks = [[] for _ in gates]
    max_dev = 0.0
    correct = 0
    t_obj = cfg.zebra.t_obj if cfg.zebra else None
    with torch.no_grad():
        for idx in _batches(len(y), batch_size, None):
            logits = model(x[idx])
            correct += int((logits.argmax(1) == y[idx]).sum())
            for i, g in enumerate(gates):
                if g.last_mask is None:
                    continue
                kept[i] += int(g.last_mask.sum())
                total[i] += g.last_mask.numel()
                if keep_masks:
                    masks[i].append(g.last_mask.clone())
                if t_obj is not None:
                    max_dev = max(max_dev, float((g.thresholds - t_obj).abs().max()))

    active = [i for i, t in enumerate(total) if t]
    fractions = {gates[i].layer_id: 1 - kept[i] / total[i] for i in active}
    specs = layer_specs(model, x.shape[-1], cfg.zebra.block_size if cfg.zebra else 1, cfg.bits)
    retained = {specs[i].layer_id: Fraction(kept[i], total[i]) for i in active}
    report = network_report(specs, retained)
    row = {
        "test_accuracy": correct / len(y),
        "mean_zero_block_fraction": float(np.mean(list(fractions.values()))) if fractions else 0.0,
        "zero_block_fractions": fractions,
        "reduced_bandwidth_percent": report.total.reduced_percent_without_overhead,
        "reduced_bandwidth_percent_with_overhead": report.total.reduced_percent_with_overhead,
        "max_threshold_deviation": max_dev,
    }
    if keep_masks:
        row["masks"] = {gates[i].layer_id: torch.cat(masks[i]) for i in active}
    return row


def _append_jsonl(path, record) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def _run_phase(model, data, cfg, epochs, gen, *, use_zebra, phase, metrics, metrics_path, l1=0.0, weight_masks=None):
    opt, sched = _make_optimizer(model, cfg, epochs)
    for epoch in range(epochs):
        ce, reg = _train_epoch(model, data, opt, cfg, gen, use_zebra=use_zebra, l1_coefficient=l1, weight_masks=weight_masks)
        sched.step()
        row = {"phase": phase, "epoch": epoch + 1, "ce_loss": ce, "reg_loss": reg}
        row.update(measure(model, data.test_x, data.test_y, cfg))
        metrics.append(row)
        if metrics_path:
            _append_jsonl(metrics_path, row)
        log.info(
            "%s epoch %d: ce=%.4f reg=%.5f acc=%.4f zero-blocks=%.4f reduced=%.2f%%",
            phase, epoch + 1, ce, reg, row["test_accuracy"], row["mean_zero_block_fraction"],
            row["reduced_bandwidth_percent"],
        )
    return model


def train(cfg: ExperimentConfig, data: Dataset | None = None, metrics_path=None) -> tuple[Checkpoint, list[dict]]:
    """Run one experiment. Returns an unfolded checkpoint and per-epoch metrics.

    With ``cfg.prune`` set, the model is first trained without gates for
    ``prune.pretrain_epochs`` (with the BN L1 penalty for network slimming),
    pruned or slimmed once, then retrained with Zebra for ``cfg.epochs``.
    """
    seed_everything(cfg.seed, cfg.num_threads)
    if data is None:
        data = load_dataset(cfg)
    if metrics_path:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    metrics: list[dict] = []
    weight_masks: dict[str, torch.Tensor] = {}

    if cfg.prune is not None:
        spec = cfg.prune
        model.set_gates_enabled(False)
        l1 = spec.l1_coefficient if spec.method == "network_slimming" else 0.0
        _run_phase(model, data, cfg, spec.pretrain_epochs, gen, use_zebra=False, phase="pretrain",
                   metrics=metrics, metrics_path=metrics_path, l1=l1)
        if spec.method == "weight_pruning":
            weight_masks = magnitude_prune(prunable_weights(model), spec.ratio)
            apply_weight_masks(model, weight_masks)
        else:
            keep = slim_channels({k: b.weight for k, b in model.prunable_bns().items()}, spec.ratio)
            model = rebuild_slimmed_model(model, keep)
        model.set_gates_enabled(True)

    use_zebra = cfg.zebra is not None
    _run_phase(model, data, cfg, cfg.epochs, gen, use_zebra=use_zebra, phase="zebra",
               metrics=metrics, metrics_path=metrics_path, weight_masks=weight_masks)
    model.eval()
    return Checkpoint(cfg, model, weight_masks), metrics


def evaluate(ckpt: Checkpoint, data: Dataset, keep_masks: bool = False) -> dict:
    """Metrics of a folded checkpoint on ``data``'s test split."""
    if not ckpt.folded:
        raise CheckpointError("checkpoint is not folded for inference; call fold_checkpoint first")
    if ckpt.config.input_size != data.test_x.shape[-1]:
        raise ConfigError(
            f"checkpoint expects {ckpt.config.input_size}px inputs, data has {data.test_x.shape[-1]}px"
        )
    return measure(ckpt.model, data.test_x, data.test_y, ckpt.config, keep_masks=keep_masks)
