"""Command-line entry point.

Every command writes machine-readable JSON lines to stderr and exits with a
code that names the failure category (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bitstream import (
    BitstreamError,
    ImageFormatError,
    container_kind,
    read_bitstream,
    read_ppm,
    read_tile_stream,
    write_bitstream,
    write_ppm,
)
from .codec import Codec, CodecConfig
from .flops import encoder_ratio, flops_count
from .metadata import MetadataError, MetadataRecord, parse_metadata
from .metrics import bpp
from .pipeline import (
    DEFAULT_STEPS,
    TILE_SIZE,
    SatelliteCodec,
    WeightsError,
    compress_image,
    compress_tiled,
    decompress_image,
    decompress_tiled,
    evaluate_dataset,
    evaluate_image,
    load_dataset,
    load_weight_set,
    resolve_weights,
    summary_table,
)
from .rangecoder import RangeDecodeError
from .synthetic import synthetic_dataset
from .tensor import NonFiniteError
from .training import LAMBDAS, FrozenParameterError, TrainConfig, TrainingDivergedError, load_bundle, save_bundle, stage1_train, stage2_train

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_BITSTREAM = 3
EXIT_WEIGHTS = 4
EXIT_INPUT = 5
EXIT_TRAINING = 6
EXIT_RANGE_DECODE = 7

# Checked in order, so subclasses come before their bases.
EXIT_CODES: list[tuple[type[BaseException], int, str]] = [
    (ImageFormatError, EXIT_INPUT, "image"),
    (MetadataError, EXIT_INPUT, "metadata"),
    (RangeDecodeError, EXIT_RANGE_DECODE, "range-decode"),
    (BitstreamError, EXIT_BITSTREAM, "bitstream"),
    (WeightsError, EXIT_WEIGHTS, "weights"),
    (TrainingDivergedError, EXIT_TRAINING, "training"),
    (FrozenParameterError, EXIT_TRAINING, "training"),
    (NonFiniteError, EXIT_TRAINING, "training"),
    (FileNotFoundError, EXIT_INPUT, "input"),
    (ValueError, EXIT_INPUT, "input"),
]


def emit(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, default=_jsonable), file=sys.stderr, flush=True)


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    return read_ppm(path.read_bytes())


def _read_metadata(path) -> MetadataRecord | None:
    if path is None:
        return None
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metadata sidecar not found: {path}")
    return parse_metadata(path.read_text())


def _decode_kwargs(args) -> dict:
    return {
        "steps": args.steps,
        "seed": args.seed,
        "compensation": not args.no_compensation,
        "use_metadata": not args.no_metadata,
    }


def _training_set(args) -> tuple[np.ndarray, list[MetadataRecord]]:
    if args.data is None:
        return synthetic_dataset(args.num_images, args.size, args.seed)
    items = load_dataset(args.data)
    if not items:
        raise FileNotFoundError(f"no *.ppm images in {args.data}")
    shapes = {img.shape for _, img, _ in items}
    if len(shapes) != 1:
        raise ImageFormatError(f"training images must share one size, found {sorted(shapes)}")
    return np.stack([img for _, img, _ in items]), [rec or MetadataRecord() for _, _, rec in items]


# ---------------------------------------------------------------------------
# commands


def cmd_compress(args) -> int:
    image = _read_image(args.input)
    record = _read_metadata(args.metadata)
    model = resolve_weights(args.weights, args.lambda_index)
    bs = compress_image(image, record, model)
    out = Path(args.out or Path(args.input).with_suffix(".csmc"))
    out.write_bytes(write_bitstream(bs))
    _, h, w = image.shape
    report = flops_count(model.codec.cfg, h + (-h % 16), w + (-w % 16))
    emit(
        "compress",
        out=out,
        width=w,
        height=h,
        lambda_index=model.lambda_index,
        payload_bytes=bs.payload_bytes,
        header_bytes=bs.header_bytes,
        bpp=bpp(bs, w, h),
        encode_gflops=report.total_flops / 1e9,
    )
    return EXIT_OK


def cmd_decompress(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise FileNotFoundError(f"bitstream not found: {path}")
    data = path.read_bytes()
    kind = container_kind(data)
    if kind == "tiles":
        ts = read_tile_stream(data)
        first = read_bitstream(ts.tiles[0]) if ts.tiles else None
        model = resolve_weights(args.weights, args.lambda_index if args.lambda_index is not None else getattr(first, "lambda_index", None))
        image, layout, _ = decompress_tiled(data, model, **_decode_kwargs(args))
        extra = {"rows": layout.rows, "cols": layout.cols}
    else:
        bs = read_bitstream(data)
        model = resolve_weights(args.weights, args.lambda_index if args.lambda_index is not None else bs.lambda_index)
        image = decompress_image(bs, model, **_decode_kwargs(args))
        extra = {}
    out = Path(args.out or path.with_suffix(".ppm"))
    out.write_bytes(write_ppm(image))
    emit("decompress", out=out, container=kind, width=image.shape[-1], height=image.shape[-2], steps=args.steps, seed=args.seed,
         compensation=not args.no_compensation, metadata=not args.no_metadata, **extra)
    return EXIT_OK


def _codec_config(args) -> CodecConfig:
    return CodecConfig.small(args.width, args.hyper) if args.width else CodecConfig()


def cmd_train_stage1(args) -> int:
    images, _ = _training_set(args)
    lam = LAMBDAS[args.lambda_index]
    cfg = TrainConfig(lam=lam, lr=args.lr, batch_size=args.batch_size, steps=args.steps, seed=args.seed, log_path=args.log,
                      comp_kl=args.comp_kl, checkpoint_every=args.checkpoint_every, checkpoint_path=args.out if args.checkpoint_every else None)
    codec, history = stage1_train(images, cfg, Codec(_codec_config(args), seed=args.seed))
    Path(args.out).write_bytes(save_bundle(codec, None, cfg, lambda_index=args.lambda_index))
    last = history[-1] if history else {}
    emit("train-stage1", out=args.out, images=len(images), lam=lam, steps=args.steps, **last)
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    path = Path(args.weights)
    if not path.is_file():
        raise WeightsError(f"stage-1 weights not found: {path}")
    codec, _, config = load_bundle(path.read_bytes())
    images, records = _training_set(args)
    mode = "none" if args.no_metadata else args.metadata_mode
    cfg = TrainConfig(lam=LAMBDAS[config.get("lambda_index") or 0], lr=args.lr, batch_size=args.batch_size, steps=args.steps,
                      seed=args.seed, log_path=args.log, metadata_mode=mode)
    model, history = stage2_train(images, records, codec, cfg)
    Path(args.out).write_bytes(save_bundle(codec, model, cfg, lambda_index=config.get("lambda_index")))
    last = history[-1] if history else {}
    emit("train-stage2", out=args.out, images=len(images), metadata_mode=mode, steps=args.steps, **last)
    return EXIT_OK


def cmd_tile_eval(args) -> int:
    image = _read_image(args.input)
    record = _read_metadata(args.metadata)
    model = resolve_weights(args.weights, args.lambda_index)
    name = Path(args.input).name
    rows = [evaluate_image(name, image, record, model, tiled=True, tile_size=args.tile_size, **_decode_kwargs(args))]
    if args.whole:
        rows.append(evaluate_image(name, image, record, model, **_decode_kwargs(args)))
    for row in rows:
        emit("tile-eval", **row.to_dict())
    print(summary_table(rows))
    if args.out:
        Path(args.out).write_bytes(compress_tiled(image, record, model, args.tile_size))
    return EXIT_OK


def cmd_eval(args) -> int:
    models = load_weight_set(args.weights)
    rows = evaluate_dataset(args.dataset, models, tiled=False, **_decode_kwargs(args))
    if args.tiles:
        rows += evaluate_dataset(args.dataset, models, tiled=True, **_decode_kwargs(args))
    for row in rows:
        emit("eval", **row.to_dict())
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r.to_dict()) + "\n" for r in rows))
    print(summary_table(rows))
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = CodecConfig()
    if args.weights:
        cfg = SatelliteCodec.load(args.weights).codec.cfg
    report = flops_count(cfg, args.height, args.width, input_positions=args.input_positions)
    ratio = encoder_ratio(cfg, args.height, args.width)
    print(report.table())
    print(f"reference dense encoder / lightweight encoder MACs: {ratio:.3f}")
    emit("flops", height=args.height, width=args.width, total_macs=report.total_macs, total_gflops=report.total_flops / 1e9,
         components=report.by_component(), encoder_ratio=ratio, transposed_conv_convention="input" if args.input_positions else "output")
    if args.out:
        Path(args.out).write_text(report.table() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="DDIM sampling steps")
    p.add_argument("--seed", type=int, default=0, help="seed of the initial diffusion noise")
    p.add_argument("--no-compensation", action="store_true", help="decode with an all-zero compensation latent")
    p.add_argument("--no-metadata", action="store_true", help="drop the metadata conditioning token")


def _add_train_flags(p: argparse.ArgumentParser, steps: int) -> None:
    p.add_argument("--data", help="directory of *.ppm images with optional sidecars (default: synthetic set)")
    p.add_argument("--num-images", type=int, default=16)
    p.add_argument("--size", type=int, default=32, help="side of synthetic images")
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--log", help="line-delimited JSON training log")
    p.add_argument("--out", required=True, help="output weights file")


def _lambda_index(value: str) -> int:
    idx = int(value)
    if not 0 <= idx < len(LAMBDAS):
        raise argparse.ArgumentTypeError(f"lambda index must be in 0..{len(LAMBDAS) - 1}")
    return idx


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satcodec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="image (.ppm) -> container")
    p.add_argument("input")
    p.add_argument("--metadata", help="sidecar (key=value lines or JSON)")
    p.add_argument("--weights", required=True, help="weights file or directory of *.csmw")
    p.add_argument("--lambda-index", type=_lambda_index)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="container -> image (.ppm)")
    p.add_argument("input")
    p.add_argument("--weights", required=True)
    p.add_argument("--lambda-index", type=_lambda_index)
    p.add_argument("--out")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("train-stage1", help="rate-distortion training of the codec")
    _add_train_flags(p, steps=500)
    p.add_argument("--lambda-index", type=_lambda_index, default=1)
    p.add_argument("--width", type=int, default=0, help="narrow codec width (0 keeps the full configuration)")
    p.add_argument("--hyper", type=int, default=8, help="hyper-latent channels of a narrow codec")
    p.add_argument("--comp-kl", type=float, default=1.0, help="weight of the compensation-latent KL term (bits per pixel)")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="diffusion training on a frozen codec")
    _add_train_flags(p, steps=2000)
    p.add_argument("--weights", required=True, help="stage-1 weights")
    p.add_argument("--metadata-mode", choices=("true", "shuffled", "none"), default="true")
    p.add_argument("--no-metadata", action="store_true", help="same as --metadata-mode none")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("tile-eval", help="tile, code and stitch one image, then score against the cropped original")
    p.add_argument("input")
    p.add_argument("--metadata")
    p.add_argument("--weights", required=True)
    p.add_argument("--lambda-index", type=_lambda_index)
    p.add_argument("--tile-size", type=int, default=TILE_SIZE)
    p.add_argument("--whole", action="store_true", help="also score whole-image coding")
    p.add_argument("--out", help="write the multi-tile container here")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_tile_eval)

    p = sub.add_parser("eval", help="rate-distortion report over a dataset directory")
    p.add_argument("dataset")
    p.add_argument("--weights", required=True, help="weights file or directory of *.csmw (one per lambda)")
    p.add_argument("--tiles", action="store_true", help="add tile-mode rows")
    p.add_argument("--out", help="write the report as line-delimited JSON")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="MAC/FLOP count of the on-board path")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--weights", help="take the codec configuration from a weights file")
    p.add_argument("--input-positions", action="store_true", help="count transposed convs over input positions")
    p.add_argument("--out")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        for kind, code, category in EXIT_CODES:
            if isinstance(exc, kind):
                emit("error", category=getattr(exc, "category", category), exit_code=code, message=str(exc))
                return code
        emit("error", category="unexpected", exit_code=EXIT_UNEXPECTED, type=type(exc).__name__, message=str(exc))
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
