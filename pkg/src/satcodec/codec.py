"""Codec networks: lightweight encoder, compensation encoder and decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .entropy import EntropyModel
from .nn import GDN, Conv2d, DepthwiseConv2d, Module, TransposedConv2d
from .tensor import ShapeError, Tensor


@dataclass
class CodecConfig:
    """Channel widths and layout knobs shared by all codec networks."""

    channels: int = 192
    latent_channels: int = 192
    hyper_channels: int = 128
    comp_channels: int = 4
    num_downsamples: int = 4
    cam_after: tuple[int, ...] = (2,)
    cheap_kernel: int = 3
    cam_kernel: int = 5
    cam_gate: str = "sigmoid"
    latent_projection: str = "dense"
    projection_kernel: int = 5

    def __post_init__(self):
        self.cam_after = tuple(int(i) for i in self.cam_after)
        if self.channels % 2 or self.latent_channels % 2:
            raise ValueError("LCB needs an even channel count")
        if self.latent_projection not in ("dense", "lcb"):
            raise ValueError(f"latent_projection must be 'dense' or 'lcb', got {self.latent_projection!r}")
        if any(not 1 <= i <= self.num_downsamples for i in self.cam_after):
            raise ValueError("cam_after entries must name a downsampling stage")

    @property
    def decoder_in_channels(self) -> int:
        return self.channels + self.comp_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def small(cls, width: int = 16, hyper: int = 8) -> "CodecConfig":
        return cls(channels=width, latent_channels=width, hyper_channels=hyper)


class LCB(Module):
    """Lightweight convolution block.

    depthwise 5x5 (stride) -> 1x1 conv to half the outputs -> per-channel
    ``cheap_kernel`` conv of those maps for the other half -> concat.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1, cheap_kernel: int = 3, rng=None):
        if c_out % 2:
            raise ValueError(f"LCB output channels must be even, got {c_out}")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.depthwise = DepthwiseConv2d(c_in, 5, stride, rng)
        self.pointwise = Conv2d(c_in, c_out // 2, 1, 1, rng)
        self.cheap = DepthwiseConv2d(c_out // 2, cheap_kernel, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        primary = self.pointwise(self.depthwise(x))
        return T.concat([primary, self.cheap(primary)], axis=-3)


class CAM(Module):
    """Convolution attention module: LCB branch gated by horizontal-then-vertical 1-D convs."""

    def __init__(self, channels: int, kernel: int = 5, cheap_kernel: int = 3, gate: str = "sigmoid", rng=None):
        if gate != "sigmoid":
            raise ValueError(f"unsupported CAM gate {gate!r}")
        self.gate = gate
        self.local = LCB(channels, channels, 1, cheap_kernel, rng)
        self.horiz = DepthwiseConv2d(channels, (1, kernel), 1, rng)
        self.vert = DepthwiseConv2d(channels, (kernel, 1), 1, rng)

    def attention(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.vert(self.horiz(x)))

    def forward(self, x: Tensor) -> Tensor:
        return T.mul(self.local(x), self.attention(x))


class Encoder(Module):
    """On-board encoder: [LCB(s=2) + GDN] per downsampling, CAM after configured stages, latent projection."""

    def __init__(self, cfg: CodecConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.stages: list[Module] = []
        c = 3
        for i in range(1, cfg.num_downsamples + 1):
            self.stages.append(LCB(c, cfg.channels, 2, cfg.cheap_kernel, rng))
            self.stages.append(GDN(cfg.channels))
            c = cfg.channels
            if i in cfg.cam_after:
                self.stages.append(CAM(cfg.channels, cfg.cam_kernel, cfg.cheap_kernel, cfg.cam_gate, rng))
        if cfg.latent_projection == "dense":
            self.project = Conv2d(cfg.channels, cfg.latent_channels, cfg.projection_kernel, 1, rng)
        else:
            self.project = LCB(cfg.channels, cfg.latent_channels, 1, cfg.cheap_kernel, rng)

    @property
    def factor(self) -> int:
        return 2**self.cfg.num_downsamples

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ShapeError(f"encoder input {h}x{w} is not divisible by {self.factor}; pad or crop first")
        for stage in self.stages:
            x = stage(x)
        return self.project(x)


class CompEncoder(Module):
    """Compensation encoder: image -> (mu_z, sigma_z) at 1/4 resolution."""

    def __init__(self, cfg: CodecConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        n, k = cfg.channels, cfg.comp_channels
        self.comp_channels = k
        self.conv1 = Conv2d(3, n, 5, 2, rng)
        self.gdn1 = GDN(n)
        self.conv2 = Conv2d(n, n, 5, 2, rng)
        self.gdn2 = GDN(n)
        self.conv3 = Conv2d(n, n, 5, 1, rng)
        self.gdn3 = GDN(n)
        self.conv4 = Conv2d(n, 2 * k, 5, 1, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"compensation encoder input {h}x{w} is not divisible by 4")
        x = self.gdn1(self.conv1(x))
        x = self.gdn2(self.conv2(x))
        x = self.gdn3(self.conv3(x))
        out = self.conv4(x)
        k = self.comp_channels
        mu, log_sigma = (out[:k], out[k:]) if out.ndim == 3 else (out[:, :k], out[:, k:])
        return mu, T.exp(log_sigma)


def reparameterize(mu: Tensor, sigma: Tensor, eps) -> Tensor:
    """``z0 = mu + sigma * eps``."""
    eps = T.as_tensor(eps) if not isinstance(eps, Tensor) else eps
    if mu.shape != sigma.shape or mu.shape != eps.shape:
        raise ShapeError(f"reparameterize shapes differ: {mu.shape}, {sigma.shape}, {eps.shape}")
    return T.add(mu, T.mul(sigma, eps))


class Decoder(Module):
    """Latent upsampler (two stride-2 transposed convs) followed by the 4-stage image decoder."""

    def __init__(self, cfg: CodecConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        n = cfg.channels
        self.cfg = cfg
        self.up1 = TransposedConv2d(cfg.latent_channels, n, 5, 2, rng)
        self.up_gdn = GDN(n, inverse=True)
        self.up2 = TransposedConv2d(n, n, 5, 2, rng)
        self.conv1 = Conv2d(cfg.decoder_in_channels, n, 5, 1, rng)
        self.igdn1 = GDN(n, inverse=True)
        self.conv2 = Conv2d(n, n, 5, 1, rng)
        self.igdn2 = GDN(n, inverse=True)
        self.tconv3 = TransposedConv2d(n, n, 5, 2, rng)
        self.igdn3 = GDN(n, inverse=True)
        self.tconv4 = TransposedConv2d(n, 3, 5, 2, rng)
        if self.conv1.c_in != n + cfg.comp_channels:
            raise ShapeError("decoder first-stage input must be upsampled latent + compensation channels")

    def upsample_latent(self, y_hat: Tensor) -> Tensor:
        return self.up2(self.up_gdn(self.up1(y_hat)))

    def forward(self, y_hat, z0: Tensor, clamp: bool = False) -> Tensor:
        """``y_hat`` is the dequantized latent (``EntropyModel.reconstruct``), not the coded residuals."""
        if hasattr(y_hat, "symbols"):
            raise TypeError("pass the dequantized latent (EntropyModel.reconstruct), not a LatentCode")
        y_hat = T.as_tensor(y_hat)
        up = self.upsample_latent(y_hat)
        if up.shape[-2:] != z0.shape[-2:] or up.ndim != z0.ndim:
            raise ShapeError(f"upsampled latent {up.shape} and compensation {z0.shape} disagree spatially")
        x = T.concat([up, z0], axis=-3)
        x = self.igdn1(self.conv1(x))
        x = self.igdn2(self.conv2(x))
        x = self.igdn3(self.tconv3(x))
        x = self.tconv4(x)
        if clamp:
            return T.Tensor(np.clip(x.data, 0.0, 1.0), dtype=x.dtype)
        return x


class Codec(Module):
    """All stage-1 networks: encoder, entropy model, compensation encoder and decoder."""

    def __init__(self, cfg: CodecConfig | None = None, seed: int = 0):
        self.cfg = cfg or CodecConfig()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.cfg, rng)
        self.entropy = EntropyModel(self.cfg.latent_channels, self.cfg.hyper_channels, rng)
        self.comp_encoder = CompEncoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        f = self.encoder.factor
        return self.cfg.latent_channels, h // f, w // f

    def hyper_shape(self, h: int, w: int) -> tuple[int, int, int]:
        f = self.encoder.factor * 4
        return self.cfg.hyper_channels, -(-h // f), -(-w // f)

    def comp_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return self.cfg.comp_channels, h // 4, w // 4
