"""Command-line toolkit: pretrain, finetune, train-scratch, eval, bench, inspect, dump-recon.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .bench import BenchError, bench_throughput
from .config import (
    VARIANTS,
    ConfigError,
    DecoderConfig,
    HieraConfig,
    decoder_config_from_mapping,
    model_config_from_mapping,
    parse_ladder_overrides,
    read_kv,
    tiny,
)
from .cost import cost_report
from .data import load_image_dir, synthetic_textures
from .layout import sample_mask
from .mae import MaskedAutoencoder, masked_input, recon_triplets, reconstruct_pixels, write_ppm
from .model import HieraClassifier
from .optim import OptimConfig, TrainState
from .tensor import no_grad
from .train import (
    TrainingHalted,
    evaluate,
    finetune_loop,
    load_pretrained,
    make_schedule,
    pretrain_loop,
    supervised_from_scratch,
)

log = logging.getLogger("minihiera")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage().strip()}")


# -- config assembly ----------------------------------------------------------------

def _file_kv(args) -> dict[str, str]:
    if not getattr(args, "config", None):
        return {}
    try:
        return read_kv(args.config)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def model_config(args, **overrides) -> HieraConfig:
    kv = _file_kv(args)
    if args.variant:
        kv["variant"] = args.variant
    ladder = parse_ladder_overrides(args.ladder or [])
    if "variant" in kv or "channels" in kv:
        config = model_config_from_mapping(kv, **overrides)
    else:
        config = tiny(**overrides)
        file_keys = {k: v for k, v in kv.items() if not k.startswith(("decoder.", "train."))}
        if file_keys:
            config = model_config_from_mapping({**config.to_mapping(), **file_keys}, **overrides)
    return config.with_ladder(**ladder) if ladder else config


def decoder_config(args, config: HieraConfig) -> DecoderConfig:
    kv = _file_kv(args)
    if config.name == "tiny":
        # desk default for the tiny encoder; any explicit setting wins
        kv = {"decoder.depth": "1", "decoder.width": "32", "decoder.heads": "2", **kv}
    for flag in ("depth", "width", "heads", "mask_ratio", "target_kind"):
        value = getattr(args, f"decoder_{flag}", None)
        if value is not None:
            kv[f"decoder.{flag}"] = str(value)
    return decoder_config_from_mapping(kv, video=config.video)


def config_from_checkpoint(ckpt: ckpt_io.Checkpoint, **overrides) -> HieraConfig:
    kv = {k[len("config."):]: v for k, v in ckpt.meta.items() if k.startswith("config.")}
    if not kv:
        raise ckpt_io.CheckpointError("checkpoint carries no model config")
    return model_config_from_mapping(kv, **overrides)


def load_data(args, config: HieraConfig) -> tuple[np.ndarray, np.ndarray]:
    if args.data == "synthetic":
        return synthetic_textures(args.num_samples, config.input_size, config.num_classes, args.seed,
                                  frames=config.num_frames if config.video else None)
    if config.video:
        raise UsageError("image directories cannot feed a video config")
    pixels, labels, classes = load_image_dir(args.data, config.input_size)
    if len(classes) > config.num_classes:
        raise UsageError(f"{len(classes)} classes in {args.data} but num_classes={config.num_classes}")
    return pixels, labels


def _write_json(path: str | None, payload: dict) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# -- commands -------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    config = model_config(args)
    extents = tuple(args.input) if args.input else None
    report = cost_report(config, extents)
    ladder = config.ladder
    print(f"ladder: attn_mode={ladder.attn_mode} pool_kernel={ladder.pool_kernel} "
          f"stride1_pools={ladder.stride1_pools} q_attn_residual={ladder.q_attn_residual}")
    print(report.table())
    print("stage resolutions: " + " ".join("x".join(map(str, r)) for r in report.stage_resolutions))
    _write_json(args.json_out, report.to_mapping())
    return EXIT_OK


def cmd_bench(args) -> int:
    config = model_config(args)
    try:
        result = bench_throughput(config, args.mode, args.ratio, args.batch, args.reps, args.warmups,
                                  args.seed, args.threads)
    except BenchError as exc:
        print(json.dumps(exc.to_mapping()), file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{result.config_id}  batch {result.batch}  {result.throughput:.2f} items/s  "
          f"median {result.median * 1e3:.2f} ms  stage-1 tokens {result.stage1_tokens}/{result.dense_stage1_tokens}")
    _write_json(args.json_out, result.to_mapping())
    return EXIT_OK


def _optim(args, kind: str) -> OptimConfig:
    base = OptimConfig.pretrain() if kind == "pretrain" else OptimConfig.finetune()
    updates = {k: getattr(args, k) for k in ("lr", "weight_decay", "warmup_epochs", "layer_decay", "clip_grad")
               if getattr(args, k, None) is not None}
    return replace(base, **updates)


def cmd_pretrain(args) -> int:
    config = model_config(args, pretrain_mode=True)
    dec = decoder_config(args, config)
    pixels, _ = load_data(args, config)
    model = MaskedAutoencoder(config, dec, args.seed)
    optim = _optim(args, "pretrain")
    steps = math.ceil(len(pixels) / args.batch)
    state = TrainState.create(model, optim, make_schedule(optim, steps, args.epochs), args.seed)
    out = Path(args.out)
    state, trace = pretrain_loop(pixels, model, state, args.epochs, args.batch, out, args.trace,
                                 fixed_masks=args.fixed_masks)
    print(f"pretrained {state.step} steps; loss {trace[0][1]:.4f} -> {trace[-1][1]:.4f}; "
          f"checkpoint {out / 'last.ckpt'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    overrides = dict(pretrain_mode=False)
    if args.drop_path is not None:
        overrides["drop_path_max"] = args.drop_path
    config = config_from_checkpoint(ckpt, **overrides)
    pixels, labels = load_data(args, config)
    model = HieraClassifier(config, args.seed)
    report = load_pretrained(model, ckpt)
    print(f"loaded {len(report.loaded)} encoder tensors; dropped {len(report.dropped)} decoder tensors; "
          f"fresh {len(report.fresh)} head tensors")
    optim = _optim(args, "finetune")
    steps = math.ceil(len(pixels) / args.batch)
    state = TrainState.create(model, optim, make_schedule(optim, steps, args.epochs), args.seed)
    state, trace = finetune_loop(pixels, labels, model, state, args.epochs, args.batch,
                                 args.label_smoothing, args.out, args.trace)
    print(f"finetuned {state.step} steps; accuracy {trace[-1][1]:.4f}; checkpoint {Path(args.out) / 'last.ckpt'}")
    return EXIT_OK


def cmd_train_scratch(args) -> int:
    overrides = {} if args.drop_path is None else {"drop_path_max": args.drop_path}
    config = model_config(args, **overrides)
    pixels, labels = load_data(args, config)
    optim = _optim(args, "scratch")
    if args.layer_decay is None:
        optim = replace(optim, layer_decay=1.0)
    state, trace, _ = supervised_from_scratch(pixels, labels, config, args.epochs, optim, args.batch,
                                              args.seed, label_smoothing=args.label_smoothing,
                                              out_dir=args.out, trace_path=args.trace)
    print(f"trained {state.step} steps; accuracy {trace[-1][1]:.4f}; checkpoint {Path(args.out) / 'last.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    config = config_from_checkpoint(ckpt, pretrain_mode=False)
    model = HieraClassifier(config, 0)
    model.load_state_dict(ckpt.section("param."))
    pixels, labels = load_data(args, config)
    acc = evaluate(model, pixels, labels, args.batch)
    print(f"accuracy {acc:.4f} on {len(pixels)} samples")
    _write_json(args.json_out, {"accuracy": acc, "samples": len(pixels), "checkpoint": str(args.checkpoint)})
    return EXIT_OK


def cmd_dump_recon(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    config = config_from_checkpoint(ckpt)
    dec_kv = {k: v for k, v in ckpt.meta.items() if k.startswith("decoder.")}
    dec = decoder_config_from_mapping(dec_kv, video=config.video)
    if dec.target_kind != "pixel_norm":
        raise UsageError("dump-recon needs a model trained on the pixel_norm target")
    model = MaskedAutoencoder(config, dec, 0)
    model.load_state_dict(ckpt.section("param."))
    args.num_samples = max(args.num_samples, args.count)
    pixels, _ = load_data(args, config)
    pixels = pixels[: args.count]
    ratio = args.decoder_mask_ratio if args.decoder_mask_ratio is not None else dec.mask_ratio
    masks = [sample_mask(model.layout, ratio, args.seed + i) for i in range(len(pixels))]
    with no_grad():
        pred = model(pixels, masks).data
    target = model.target(pixels)
    recon = reconstruct_pixels(pred, target, pixels, masks, model.layout, model.final_tokens)
    hidden = masked_input(pixels, masks, model.layout, model.final_tokens)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "recon.ppm"
    write_ppm(path, recon_triplets(pixels, hidden, recon))
    print(f"wrote {path}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--variant", choices=list(VARIANTS), help="named model size (default: tiny desk config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="DIR", default="runs")
    p.add_argument("--ladder", metavar="KEY=VAL", nargs="+", action="extend",
                   help="ablation toggles: attn_mode, pool_kernel, stride1_pools, q_attn_residual, row")
    p.add_argument("--json-out", metavar="PATH")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default="synthetic", help="'synthetic' or a directory of images")
    p.add_argument("--num-samples", type=int, default=64)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-epochs", type=float)
    p.add_argument("--clip-grad", type=float)
    p.add_argument("--trace", metavar="CSV", help="write step,value rows here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="minihiera", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", help="print parameter and MAC counts")
    _common(p)
    p.add_argument("--input", type=int, nargs="+", metavar="N", help="H W (or T H W for video)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="forward-only throughput")
    _common(p)
    p.add_argument("--mode", choices=["dense", "sparse"], default="dense")
    p.add_argument("--ratio", type=float, default=0.6, help="mask ratio for sparse mode")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmups", type=int, default=2)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    _common(p)
    _training(p)
    p.add_argument("--decoder-depth", type=int)
    p.add_argument("--decoder-width", type=int)
    p.add_argument("--decoder-heads", type=int)
    p.add_argument("--decoder-mask-ratio", "--mask-ratio", dest="decoder_mask_ratio", type=float)
    p.add_argument("--decoder-target-kind", "--target", dest="decoder_target_kind", choices=["pixel_norm", "hog"])
    p.add_argument("--fixed-masks", action="store_true", help="reuse each sample's mask every epoch")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised finetuning from a pretraining checkpoint")
    _common(p)
    _training(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer-decay", type=float)
    p.add_argument("--drop-path", type=float)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("train-scratch", help="supervised training from random weights")
    _common(p)
    _training(p)
    p.add_argument("--layer-decay", type=float)
    p.add_argument("--drop-path", type=float)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.set_defaults(func=cmd_train_scratch)

    p = sub.add_parser("eval", help="accuracy of a classifier checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="synthetic")
    p.add_argument("--num-samples", type=int, default=64)
    p.add_argument("--batch", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-recon", help="write input / masked / reconstruction triplets")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="synthetic")
    p.add_argument("--num-samples", type=int, default=4)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--mask-ratio", dest="decoder_mask_ratio", type=float)
    p.set_defaults(func=cmd_dump_recon)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"minihiera {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingHalted as exc:
        print(f"minihiera {args.command}: {exc}", file=sys.stderr)
        if exc.checkpoint is not None:
            print(f"last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"minihiera {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
