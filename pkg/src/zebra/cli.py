"""Command-line entry point: ``zebra <command> ...``.

Exit status: 0 on success, 2 for usage errors, otherwise the category code of
the raised error (3 shape/topology, 4 codec format, 5 config, 6 data,
7 divergence, 8 checkpoint, 1 anything else).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import bandwidth, blockgrid, codec
from .errors import ConfigError, ZebraError

log = logging.getLogger("zebra")


def _is_checkpoint(path: Path) -> bool:
    return path.suffix == ".safetensors"


def cmd_train(args) -> int:
    from .harness.checkpoint import save_checkpoint
    from .harness.config import load_config
    from .harness.train import train

    cfg = load_config(args.config)
    out = Path(args.out or Path("runs") / (cfg.name or Path(args.config).stem))
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()
    ckpt, metrics = train(cfg, metrics_path=metrics_path)
    save_checkpoint(ckpt, out / "checkpoint.safetensors")
    last = metrics[-1] if metrics else {}
    print(json.dumps({k: v for k, v in last.items() if k != "zero_block_fractions"}))
    print(f"checkpoint: {out / 'checkpoint.safetensors'}")
    return 0


def cmd_eval(args) -> int:
    from .harness.checkpoint import fold_checkpoint, load_checkpoint
    from .harness.config import load_config
    from .harness.data import load_dataset
    from .harness.train import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config) if args.config else ckpt.config
    if not ckpt.folded:
        log.info("folding checkpoint thresholds to t_obj before evaluation")
        fold_checkpoint(ckpt)
    row = evaluate(ckpt, load_dataset(cfg))
    print(json.dumps(row))
    return 0


def _mask_for(x: torch.Tensor, block_size: int, threshold: float):
    layout = blockgrid.make_layout(x.shape[-2], x.shape[-1], block_size)
    stats = blockgrid.block_max(x, layout)
    thresholds = torch.full((x.shape[0],), threshold, dtype=x.dtype)
    return blockgrid.mask_from_thresholds(stats, thresholds), layout


def cmd_encode(args) -> int:
    x = codec.read_raw_map(args.raw_map)
    mask, layout = _mask_for(x, args.block_size, args.threshold)
    data = codec.encode(x, mask, layout.effective_block_size, codec.DTYPE_NAMES[args.dtype])
    Path(args.out).write_bytes(data)
    kept = int(mask.sum())
    print(f"{args.out}: {len(data)} bytes, {kept}/{mask.numel()} blocks kept")
    return 0


def cmd_decode(args) -> int:
    x, mask = codec.decode(Path(args.input).read_bytes())
    codec.write_raw_map(args.out, x.to(torch.float32))
    print(f"{args.out}: {tuple(x.shape)}, {int(mask.sum())}/{mask.numel()} blocks present")
    return 0


def _report_from_arch(d: dict):
    arch = d["architecture"]
    name = arch.get("name", "resnet18")
    if name != "resnet18":
        raise ConfigError(f"unknown analytic architecture {name!r} (supported: resnet18)")
    specs = bandwidth.resnet18_layer_specs(
        arch.get("input_size", 32), d.get("block_size", 4), d.get("bits", 32), arch.get("in_channels", 3)
    )
    return bandwidth.network_report(specs), d.get("model_label", name), d.get("dataset_label", "")


def _report_from_experiment(cfg, model):
    from .harness.models import layer_specs

    block = cfg.zebra.block_size if cfg.zebra else 1
    specs = layer_specs(model, cfg.input_size, block, cfg.bits)
    return bandwidth.network_report(specs), cfg.model, cfg.dataset


def cmd_report(args) -> int:
    from .harness.checkpoint import load_checkpoint
    from .harness.config import ExperimentConfig, load_yaml
    from .harness.train import build_model

    path = Path(args.source)
    if _is_checkpoint(path):
        ckpt = load_checkpoint(path)
        report, model_label, dataset_label = _report_from_experiment(ckpt.config, ckpt.model)
    else:
        d = load_yaml(path)
        if "architecture" in d:
            report, model_label, dataset_label = _report_from_arch(d)
        else:
            cfg = ExperimentConfig.from_dict(d)
            report, model_label, dataset_label = _report_from_experiment(cfg, build_model(cfg))

    if args.format == "tsv":
        text = bandwidth.to_tsv(report)
    elif args.format == "jsonl":
        text = bandwidth.to_jsonl(report)
    else:
        text = "model\tdataset\trequired bandwidth\tbandwidth overhead\n"
        text += bandwidth.format_overhead_row(report, model_label, dataset_label) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_viz(args) -> int:
    from .harness.checkpoint import fold_checkpoint, load_checkpoint
    from .viz import load_image, render_overlay

    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.folded:
        fold_checkpoint(ckpt)
    image = load_image(args.image)
    cfg = ckpt.config
    x = torch.from_numpy(image)
    if cfg.dataset == "cifar10":
        mean = torch.tensor(cfg.data.mean)[:, None, None]
        std = torch.tensor(cfg.data.std)[:, None, None]
        x = (x - mean) / std
    model = ckpt.model.eval()
    with torch.no_grad():
        model(x[None])
    masks = {g.layer_id: g.last_mask[0] for g in model.gates() if g.last_mask is not None}
    paths = render_overlay(image, masks, args.layers or None, args.out_dir)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zebra", description="Zero-block activation pruning toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("train", help="train a model from an experiment config")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (default: runs/<config name>)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint with constant t_obj gating")
    s.add_argument("checkpoint")
    s.add_argument("config", nargs="?", help="experiment config for the dataset (default: the checkpoint's)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("encode", help="compress a raw f32 map into the ZBRA format")
    s.add_argument("raw_map")
    s.add_argument("out")
    s.add_argument("--block-size", type=int, default=4)
    s.add_argument("--threshold", type=float, default=0.0, help="blocks with max <= threshold are dropped")
    s.add_argument("--dtype", choices=sorted(codec.DTYPE_NAMES), default="f32")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="expand a ZBRA stream back into a raw f32 map")
    s.add_argument("input")
    s.add_argument("out")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("report", help="bandwidth and index-overhead report")
    s.add_argument("source", help="architecture or experiment config (.yaml), or checkpoint (.safetensors)")
    s.add_argument("--format", choices=["table", "tsv", "jsonl"], default="table")
    s.add_argument("--out", help="also write the report to this file")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("viz", help="render zero-block overlays for one image")
    s.add_argument("checkpoint")
    s.add_argument("image")
    s.add_argument("out_dir")
    s.add_argument("--layers", nargs="*", help="gated layer ids to render (default: all)")
    s.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ZebraError as e:
        print(f"zebra {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"zebra {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
