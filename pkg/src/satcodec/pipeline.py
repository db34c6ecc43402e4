"""End-to-end compression and decompression, tiling and rate-distortion evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .bitstream import (
    Bitstream,
    FieldRangeError,
    TileStream,
    read_bitstream,
    read_ppm,
    read_tile_stream,
    write_bitstream,
    write_tile_stream,
)
from .codec import Codec
from .diffusion import DiffusionModel, generate_compensation
from .metadata import MetadataRecord, parse_metadata
from .metrics import bpp, ms_ssim, psnr
from .training import load_bundle, save_bundle

PAD_MULTIPLE = 16
TILE_SIZE = 256
DEFAULT_STEPS = 25


class WeightsError(ValueError):
    """Weights are missing, unreadable or do not match the stream."""


@dataclass
class SatelliteCodec:
    """One shipped weight set: stage-1 codec, optional diffusion stage, and its lambda index."""

    codec: Codec
    diffusion: DiffusionModel | None
    lambda_index: int

    def to_bytes(self) -> bytes:
        return save_bundle(self.codec, self.diffusion, lambda_index=self.lambda_index)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SatelliteCodec":
        codec, diffusion, config = load_bundle(data)
        idx = config.get("lambda_index")
        if idx is None:
            raise WeightsError("weights file does not record a lambda index")
        return cls(codec.eval(), diffusion.eval() if diffusion else None, int(idx))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SatelliteCodec":
        path = Path(path)
        if not path.is_file():
            raise WeightsError(f"weights file not found: {path}")
        return cls.from_bytes(path.read_bytes())


def resolve_weights(path, lambda_index: int | None = None) -> SatelliteCodec:
    """Load a weights file, or pick the file matching ``lambda_index`` from a directory of ``*.csmw``."""
    path = Path(path)
    if path.is_dir():
        models = [SatelliteCodec.load(p) for p in sorted(path.glob("*.csmw"))]
        if lambda_index is None:
            if len(models) != 1:
                raise WeightsError(f"{path} holds {len(models)} weight sets; pass --lambda-index")
            return models[0]
        for m in models:
            if m.lambda_index == lambda_index:
                return m
        raise WeightsError(f"no weights for lambda index {lambda_index} in {path}")
    model = SatelliteCodec.load(path)
    if lambda_index is not None and model.lambda_index != lambda_index:
        raise WeightsError(f"weights are for lambda index {model.lambda_index}, not {lambda_index}")
    return model


# ---------------------------------------------------------------------------
# single image


def reflect_pad(image: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Reflect-pad bottom and right edges up to the next multiple (mirror about the edge pixel)."""
    _, h, w = image.shape
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return image
    mode = "reflect" if min(h, w) > 1 else "symmetric"
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode=mode)


def compress_image(image: np.ndarray, metadata: MetadataRecord | None, model: SatelliteCodec) -> Bitstream:
    image = np.asarray(image, dtype=T.default_dtype())
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    x = reflect_pad(image)
    codec = model.codec
    with T.no_grad():
        code, gauss = codec.entropy.quantize_latent(codec.encoder(T.Tensor(x[None]))[0])
    hyper, main = codec.entropy.encode(code, gauss)
    meta = tuple(metadata.values().tolist()) if metadata is not None else ()
    return Bitstream(w, h, model.lambda_index, meta, hyper, main)


def decompress_image(
    bs: Bitstream,
    model: SatelliteCodec,
    steps: int = DEFAULT_STEPS,
    seed: int = 0,
    compensation: bool = True,
    use_metadata: bool = True,
) -> np.ndarray:
    """Decode a container to a (3, H, W) image in [0, 1].

    ``compensation=False`` feeds the decoder an all-zero compensation latent;
    ``use_metadata=False`` replaces the metadata token with zeros.
    """
    if bs.lambda_index != model.lambda_index:
        raise WeightsError(f"stream was coded at lambda index {bs.lambda_index}, weights are for {model.lambda_index}")
    codec = model.codec
    ph, pw = bs.height + (-bs.height % PAD_MULTIPLE), bs.width + (-bs.width % PAD_MULTIPLE)
    code, gauss = codec.entropy.decode(bs.hyper, bs.main, codec.latent_shape(ph, pw), codec.hyper_shape(ph, pw))
    y_hat = codec.entropy.reconstruct(code, gauss)
    comp_shape = codec.comp_shape(ph, pw)
    if compensation:
        if model.diffusion is None:
            raise WeightsError("weights carry no diffusion stage; decode with compensation disabled")
        record = MetadataRecord.from_values(bs.metadata) if bs.metadata else MetadataRecord()
        z0 = generate_compensation(y_hat, record, steps, seed, model.diffusion, use_metadata=use_metadata)
    else:
        z0 = np.zeros(comp_shape, dtype=T.default_dtype())
    with T.no_grad():
        x_hat = codec.decoder(y_hat[None], T.Tensor(z0[None])).data[0]
    return np.clip(x_hat[:, : bs.height, : bs.width], 0.0, 1.0)


def compress_bytes(image, metadata, model) -> bytes:
    return write_bitstream(compress_image(image, metadata, model))


def decompress_bytes(data: bytes, model: SatelliteCodec, **kwargs) -> np.ndarray:
    return decompress_image(read_bitstream(data), model, **kwargs)


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class TileLayout:
    rows: int
    cols: int
    tile: int
    height: int
    width: int
    top: int
    left: int

    @property
    def cropped_shape(self) -> tuple[int, int]:
        return self.rows * self.tile, self.cols * self.tile

    def crop(self, image: np.ndarray) -> np.ndarray:
        ch, cw = self.cropped_shape
        return image[..., self.top : self.top + ch, self.left : self.left + cw]


def tile_layout(height: int, width: int, size: int = TILE_SIZE) -> TileLayout:
    if height < size or width < size:
        raise ValueError(f"image {height}x{width} is smaller than one {size}x{size} tile")
    rows, cols = height // size, width // size
    return TileLayout(rows, cols, size, height, width, (height - rows * size) // 2, (width - cols * size) // 2)


def split_tiles(image: np.ndarray, size: int = TILE_SIZE) -> tuple[list[np.ndarray], TileLayout]:
    """Center-crop to whole tiles, then partition row-major."""
    layout = tile_layout(image.shape[-2], image.shape[-1], size)
    cropped = layout.crop(image)
    tiles = [
        cropped[..., r * size : (r + 1) * size, c * size : (c + 1) * size].copy()
        for r in range(layout.rows)
        for c in range(layout.cols)
    ]
    return tiles, layout


def stitch_tiles(tiles: list[np.ndarray], layout: TileLayout) -> np.ndarray:
    if len(tiles) != layout.rows * layout.cols:
        raise ValueError(f"{len(tiles)} tiles for a {layout.rows}x{layout.cols} layout")
    rows = [np.concatenate(tiles[r * layout.cols : (r + 1) * layout.cols], axis=-1) for r in range(layout.rows)]
    return np.concatenate(rows, axis=-2)


def compress_tiled(image: np.ndarray, metadata, model: SatelliteCodec, size: int = TILE_SIZE) -> bytes:
    tiles, layout = split_tiles(image, size)
    streams = [compress_bytes(t, metadata, model) for t in tiles]
    return write_tile_stream(TileStream(layout.width, layout.height, size, layout.rows, layout.cols, streams))


def decompress_tiled(data: bytes, model: SatelliteCodec, **kwargs) -> tuple[np.ndarray, TileLayout, list[Bitstream]]:
    ts = read_tile_stream(data)
    layout = tile_layout(ts.height, ts.width, ts.tile_size)
    if (layout.rows, layout.cols) != (ts.rows, ts.cols):
        raise FieldRangeError(f"tile grid {ts.rows}x{ts.cols} inconsistent with {ts.width}x{ts.height} / {ts.tile_size}")
    streams = [read_bitstream(t) for t in ts.tiles]
    tiles = [decompress_image(s, model, **kwargs) for s in streams]
    return stitch_tiles(tiles, layout), layout, streams


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    image: str
    lambda_index: int
    mode: str
    bpp: float
    psnr: float
    ms_ssim: float

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in self.__dict__.items()}


def evaluate_image(
    name: str, image: np.ndarray, record, model: SatelliteCodec, tiled: bool = False, tile_size: int = TILE_SIZE, **kwargs
) -> EvalRow:
    """One RD point. Tile mode compares the stitched reconstruction with the same crop of the original."""
    if tiled:
        recon, layout, streams = decompress_tiled(compress_tiled(image, record, model, tile_size), model, **kwargs)
        ref = layout.crop(image)
        rate = bpp(streams, layout.cropped_shape[1], layout.cropped_shape[0])
    else:
        bs = compress_image(image, record, model)
        recon = decompress_image(bs, model, **kwargs)
        ref = image
        rate = bpp(bs, image.shape[-1], image.shape[-2])
    return EvalRow(name, model.lambda_index, "tile" if tiled else "whole", rate, psnr(ref, recon), ms_ssim(ref, recon))


def load_dataset(directory) -> list[tuple[str, np.ndarray, MetadataRecord | None]]:
    """``*.ppm`` images with optional ``<stem>.meta`` or ``<stem>.json`` sidecars, sorted by name."""
    directory = Path(directory)
    items = []
    for path in sorted(directory.glob("*.ppm")):
        record = None
        for ext in (".meta", ".json"):
            side = path.with_suffix(ext)
            if side.is_file():
                record = parse_metadata(side.read_text())
                break
        items.append((path.name, read_ppm(path.read_bytes()), record))
    return items


def evaluate_dataset(directory, models: list[SatelliteCodec], tiled: bool = False, tile_size: int = TILE_SIZE, **kwargs) -> list[EvalRow]:
    rows = []
    for name, image, record in load_dataset(directory):
        for model in sorted(models, key=lambda m: m.lambda_index):
            rows.append(evaluate_image(name, image, record, model, tiled=tiled, tile_size=tile_size, **kwargs))
    return rows


def load_weight_set(path) -> list[SatelliteCodec]:
    path = Path(path)
    if path.is_dir():
        models = [SatelliteCodec.load(p) for p in sorted(path.glob("*.csmw"))]
        if not models:
            raise WeightsError(f"no *.csmw weight files in {path}")
        return models
    return [SatelliteCodec.load(path)]


def summary_table(rows: list[EvalRow]) -> str:
    lines = [f"{'image':24s} {'lambda':>6s} {'mode':>6s} {'bpp':>8s} {'PSNR':>8s} {'MS-SSIM':>8s}"]
    for r in rows:
        lines.append(f"{r.image:24s} {r.lambda_index:6d} {r.mode:>6s} {r.bpp:8.4f} {r.psnr:8.3f} {r.ms_ssim:8.5f}")
    return "\n".join(lines)
