"""Desk-scale CNNs with a Zebra gate after every convolution's activation."""
from __future__ import annotations

import copy
from typing import Mapping

import torch
from torch import nn

from ..bandwidth import LayerSpec
from ..blockgrid import make_layout
from ..errors import ConfigError, TopologyError
from ..gating import ZebraConfig, ZebraGate

ARCHITECTURES = {
    "toy_cnn": {"kind": "convnet", "widths": [8, "M", 16, 16]},
    "vgg_small": {"kind": "convnet", "widths": [16, "M", 32, "M", 64, "M", 64]},
    "resnet_small": {"kind": "resnet", "stage_widths": [16, 32, 64], "blocks_per_stage": 1},
}


class ConvUnit(nn.Module):
    """conv3x3 -> BN -> ReLU -> gate."""

    def __init__(self, cin: int, cout: int, zcfg: ZebraConfig | None, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU()
        self.gate = ZebraGate(cout, zcfg)

    def forward(self, x):
        return self.gate(self.relu(self.bn(self.conv(x))))


class ZebraNet(nn.Module):
    """Shared plumbing: gate enumeration, naming, slimming bookkeeping."""

    arch: dict

    def _name_gates(self):
        for name, m in self.named_modules():
            if isinstance(m, ZebraGate):
                m.layer_id = name
                if m.head is not None:
                    m.head.layer_id = name

    def gates(self) -> list[ZebraGate]:
        return [m for m in self.modules() if isinstance(m, ZebraGate)]

    def set_gates_enabled(self, enabled: bool) -> None:
        for g in self.gates():
            g.enabled = enabled and g.cfg is not None

    def prunable_bns(self) -> dict[str, nn.BatchNorm2d]:
        raise NotImplementedError

    def gate_consumers(self) -> list[tuple[int, int, int]]:
        """``(F, O, s)`` of the layer reading each gate's output, in gate order."""
        raise NotImplementedError

    def slimmed(self, keep: Mapping[str, torch.Tensor]) -> "ZebraNet":
        raise NotImplementedError

    def _check_keep(self, keep: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        bns = self.prunable_bns()
        unknown = set(keep) - set(bns)
        if unknown:
            raise TopologyError(f"channels of {sorted(unknown)} cannot be pruned in this topology")
        full = {}
        for name, bn in bns.items():
            k = keep.get(name)
            if k is None:
                k = torch.ones(bn.num_features, dtype=torch.bool)
            k = k.bool().flatten()
            if k.numel() != bn.num_features:
                raise TopologyError(f"{name}: mask has {k.numel()} entries for {bn.num_features} channels")
            if not k.any():
                raise TopologyError(f"{name}: every channel would be removed")
            full[name] = k
        return full


def _copy_unit(dst: ConvUnit, src: ConvUnit, out_idx, in_idx) -> None:
    with torch.no_grad():
        dst.conv.weight.copy_(src.conv.weight[out_idx][:, in_idx])
        for attr in ("weight", "bias", "running_mean", "running_var"):
            getattr(dst.bn, attr).copy_(getattr(src.bn, attr)[out_idx])
        dst.bn.num_batches_tracked.copy_(src.bn.num_batches_tracked)
        if src.gate.head is not None and dst.gate.head is not None:
            dst.gate.head.weight.copy_(src.gate.head.weight[out_idx][:, out_idx])
            dst.gate.head.bias.copy_(src.gate.head.bias[out_idx])
    dst.gate.mode = src.gate.mode
    dst.gate.enabled = src.gate.enabled
    if src.gate.head is None:
        dst.gate.head = None


class GatedConvNet(ZebraNet):
    """Plain conv stack: ints are conv widths, ``"M"`` is a 2x2 max-pool."""

    def __init__(self, widths, zcfg: ZebraConfig | None, in_channels: int = 3, num_classes: int = 10):
        super().__init__()
        self.arch = {"kind": "convnet", "widths": list(widths), "in_channels": in_channels, "num_classes": num_classes}
        layers, c = [], in_channels
        for w in widths:
            if w == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers.append(ConvUnit(c, w, zcfg))
                c = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(c, num_classes)
        self._name_gates()

    def forward(self, x):
        x = self.pool(self.features(x)).flatten(1)
        return self.classifier(x)

    def units(self) -> dict[str, ConvUnit]:
        return {f"features.{i}": m for i, m in enumerate(self.features) if isinstance(m, ConvUnit)}

    def prunable_bns(self):
        return {name: u.bn for name, u in self.units().items()}

    def gate_consumers(self):
        widths = [w for w in self.arch["widths"] if w != "M"]
        return [(3, w, 1) for w in widths[1:]] + [(1, self.arch["num_classes"], 1)]

    def slimmed(self, keep):
        keep = self._check_keep(keep)
        units = self.units()
        new_widths, it = [], iter(units)
        for w in self.arch["widths"]:
            new_widths.append(w if w == "M" else int(keep[next(it)].sum()))
        zcfg = next(iter(units.values())).gate.cfg
        with torch.random.fork_rng():
            new = GatedConvNet(new_widths, zcfg, self.arch["in_channels"], self.arch["num_classes"])
        new_units = new.units()
        in_idx = torch.arange(self.arch["in_channels"])
        for name, unit in units.items():
            out_idx = keep[name].nonzero().flatten()
            _copy_unit(new_units[name], unit, out_idx, in_idx)
            in_idx = out_idx
        with torch.no_grad():
            new.classifier.weight.copy_(self.classifier.weight[:, in_idx])
            new.classifier.bias.copy_(self.classifier.bias)
        new.train(self.training)
        return new


class BasicBlock(nn.Module):
    def __init__(self, cin: int, inner: int, cout: int, stride: int, zcfg: ZebraConfig | None):
        super().__init__()
        self.unit1 = ConvUnit(cin, inner, zcfg, stride)
        self.conv2 = nn.Conv2d(inner, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.shortcut = nn.Identity()
        self.relu = nn.ReLU()
        self.gate = ZebraGate(cout, zcfg)
        self.stride = stride

    def forward(self, x):
        out = self.bn2(self.conv2(self.unit1(x)))
        return self.gate(self.relu(out + self.shortcut(x)))


class ResNetSmall(ZebraNet):
    """CIFAR-style ResNet. Only the inner (first) conv of each block is slimmable;
    block outputs feed residual additions and keep their width."""

    def __init__(
        self,
        zcfg: ZebraConfig | None,
        stage_widths=(16, 32, 64),
        blocks_per_stage: int = 1,
        inner_widths=None,
        in_channels: int = 3,
        num_classes: int = 10,
    ):
        super().__init__()
        n_blocks = len(stage_widths) * blocks_per_stage
        if inner_widths is None:
            inner_widths = [w for w in stage_widths for _ in range(blocks_per_stage)]
        if len(inner_widths) != n_blocks:
            raise ConfigError(f"need {n_blocks} inner widths, got {len(inner_widths)}")
        self.arch = {
            "kind": "resnet",
            "stage_widths": list(stage_widths),
            "blocks_per_stage": blocks_per_stage,
            "inner_widths": list(inner_widths),
            "in_channels": in_channels,
            "num_classes": num_classes,
        }
        self.stem = ConvUnit(in_channels, stage_widths[0], zcfg)
        c, inner = stage_widths[0], iter(inner_widths)
        stages = []
        for i, w in enumerate(stage_widths):
            blocks = []
            for b in range(blocks_per_stage):
                stride = 2 if (i > 0 and b == 0) else 1
                blocks.append(BasicBlock(c, next(inner), w, stride, zcfg))
                c = w
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(c, num_classes)
        self._name_gates()

    def forward(self, x):
        x = self.stages(self.stem(x))
        return self.classifier(self.pool(x).flatten(1))

    def blocks(self) -> dict[str, BasicBlock]:
        return {
            f"stages.{i}.{j}": blk
            for i, stage in enumerate(self.stages)
            for j, blk in enumerate(stage)
        }

    def prunable_bns(self):
        return {f"{name}.unit1": blk.unit1.bn for name, blk in self.blocks().items()}

    def gate_consumers(self):
        consumers = []
        blocks = list(self.blocks().values())
        consumers.append((3, blocks[0].unit1.conv.out_channels, blocks[0].stride))
        for i, blk in enumerate(blocks):
            consumers.append((3, blk.conv2.out_channels, 1))
            if i + 1 < len(blocks):
                nxt = blocks[i + 1]
                consumers.append((3, nxt.unit1.conv.out_channels, nxt.stride))
            else:
                consumers.append((1, self.arch["num_classes"], 1))
        return consumers

    def slimmed(self, keep):
        keep = self._check_keep(keep)
        a = self.arch
        inner = [int(keep[f"{name}.unit1"].sum()) for name in self.blocks()]
        with torch.random.fork_rng():
            new = ResNetSmall(
                self.stem.gate.cfg, a["stage_widths"], a["blocks_per_stage"], inner,
                a["in_channels"], a["num_classes"],
            )
        state = copy.deepcopy(self.state_dict())
        for name in self.blocks():
            k = keep[f"{name}.unit1"].nonzero().flatten()
            p = f"{name}.unit1"
            state[f"{p}.conv.weight"] = state[f"{p}.conv.weight"][k]
            for attr in ("weight", "bias", "running_mean", "running_var"):
                state[f"{p}.bn.{attr}"] = state[f"{p}.bn.{attr}"][k]
            if f"{p}.gate.head.weight" in state:
                state[f"{p}.gate.head.weight"] = state[f"{p}.gate.head.weight"][k][:, k]
                state[f"{p}.gate.head.bias"] = state[f"{p}.gate.head.bias"][k]
            state[f"{name}.conv2.weight"] = state[f"{name}.conv2.weight"][:, k]
        _match_gate_modes(new, self)
        new.load_state_dict(state)
        new.train(self.training)
        return new


def _match_gate_modes(dst: ZebraNet, src: ZebraNet) -> None:
    for d, s in zip(dst.gates(), src.gates()):
        d.mode, d.enabled = s.mode, s.enabled
        if s.head is None:
            d.head = None


def build_from_arch(arch: dict, zcfg: ZebraConfig | None) -> ZebraNet:
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "convnet":
        return GatedConvNet(arch["widths"], zcfg, arch.get("in_channels", 3), arch.get("num_classes", 10))
    if kind == "resnet":
        return ResNetSmall(
            zcfg,
            arch["stage_widths"],
            arch.get("blocks_per_stage", 1),
            arch.get("inner_widths"),
            arch.get("in_channels", 3),
            arch.get("num_classes", 10),
        )
    raise ConfigError(f"unknown architecture kind {kind!r}")


def build_named(model: str, zcfg: ZebraConfig | None, in_channels: int = 3, num_classes: int = 10) -> ZebraNet:
    if model not in ARCHITECTURES:
        raise ConfigError(f"unknown model {model!r}; choose from {sorted(ARCHITECTURES)}")
    arch = dict(ARCHITECTURES[model], in_channels=in_channels, num_classes=num_classes)
    return build_from_arch(arch, zcfg)


def gated_map_shapes(model: ZebraNet, input_size: int) -> list[tuple[int, int, int]]:
    """``(C, H, W)`` of every gated map for a square input, in gate order."""
    shapes = []
    hooks = [g.register_forward_hook(lambda m, i, o: shapes.append(tuple(o.shape[1:]))) for g in model.gates()]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, model.arch["in_channels"], input_size, input_size))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return shapes


def layer_specs(model: ZebraNet, input_size: int, block_size: int, bits: int = 32) -> list[LayerSpec]:
    """Bandwidth rows for the gated maps, each paired with the layer that reads it."""
    specs = []
    for gate, (C, H, W), (F, O, s) in zip(model.gates(), gated_map_shapes(model, input_size), model.gate_consumers()):
        b = make_layout(H, W, block_size).effective_block_size
        specs.append(LayerSpec(gate.layer_id, C, H, W, F, O, s, b, bits))
    return specs
