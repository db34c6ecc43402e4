"""Conditional latent diffusion that regenerates the compensation latent at the decoder.

The noise-prediction network is a small two-resolution U-Net. Quantized
latents are injected additively into every residual block, the metadata
embedding enters through single-token cross-attention, and sampling is
deterministic DDIM (eta = 0).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .metadata import FIELDS, MetadataRecord, normalize
from .nn import Conv2d, Linear, Module, TransposedConv2d
from .tensor import ShapeError, Tensor


class ScheduleError(ValueError):
    """Invalid noise schedule request or timestep."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t) -> np.ndarray:
        """``alpha_bar`` at 1-based step(s) ``t``; ``t = 0`` maps to 1 (clean data)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ScheduleError(f"timestep outside [0, {self.T}]")
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])


def make_schedule(T_steps: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    """Linear-in-beta schedule with ``alpha_bar`` by cumulative product."""
    if T_steps < 1:
        raise ScheduleError(f"T must be >= 1, got {T_steps}")
    if not 0.0 < beta_1 < 1.0 or not 0.0 < beta_T < 1.0:
        raise ScheduleError("betas must lie in (0, 1)")
    if T_steps > 1 and not beta_1 < beta_T:
        raise ScheduleError(f"beta must increase: beta_1={beta_1} >= beta_T={beta_T}")
    beta = np.linspace(beta_1, beta_T, T_steps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T_steps, beta, alpha_bar)


def _check_step(t, s: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise ScheduleError(f"timesteps must be integers, got {t.dtype}")
    if np.any(t < 1) or np.any(t > s.T):
        raise ScheduleError(f"timestep outside [1, {s.T}]")
    return t


def _per_sample(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``t`` is a scalar or one step per leading (batch) index.
    """
    z0, eps = np.asarray(z0), np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {z0.shape} and eps {eps.shape} differ")
    ab = _per_sample(s.abar(_check_step(t, s)), z0.ndim)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype, copy=False)


def ddim_step(z_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from ``t`` to ``t_prev`` (``t_prev = 0`` returns the clean estimate)."""
    if not 0 <= t_prev < t <= s.T:
        raise ScheduleError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ab_t, ab_prev = float(s.abar(t)), float(s.abar(t_prev))
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def sampling_timesteps(T_steps: int, steps: int) -> list[int]:
    """Uniform-stride descending sub-sequence ``round(k T / steps)`` for ``k = steps .. 1``."""
    if not 1 <= steps <= T_steps:
        raise ScheduleError(f"steps must be in [1, {T_steps}], got {steps}")
    return [int(round(k * T_steps / steps)) for k in range(steps, 0, -1)]


def ddim_sample(
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    shape: tuple[int, ...],
    s: NoiseSchedule,
    steps: int,
    seed: int,
) -> np.ndarray:
    """Run the sampler from ``z_T ~ N(0, I)`` drawn from a generator seeded with ``seed``."""
    z = np.random.default_rng(seed).standard_normal(shape)
    ts = sampling_timesteps(s.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        z = ddim_step(z, t, t_prev, np.asarray(eps_fn(z, t), dtype=np.float64), s)
    return z


# ---------------------------------------------------------------------------
# conditioning


def sinusoidal_embedding(values, dim: int) -> np.ndarray:
    """Standard sinusoidal map applied to each scalar: [..., dim] with sin at even, cos at odd slots."""
    if dim % 2:
        raise ValueError(f"embedding width must be even, got {dim}")
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite value passed to sinusoidal embedding")
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angle = values[..., None] * freq
    out = np.empty(values.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


class MetadataEncoder(Module):
    """Per-field sinusoidal embeddings, concatenated, then a two-layer MLP to one ``d``-wide token."""

    def __init__(self, d: int = 128, field_dim: int = 16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.field_dim = d, field_dim
        self.fc1 = Linear(len(FIELDS) * field_dim, d, rng)
        self.fc2 = Linear(d, d, rng)

    def features(self, normalized: np.ndarray) -> np.ndarray:
        """Pre-MLP vector for normalized fields (..., 8) -> (..., 8 * field_dim)."""
        normalized = np.asarray(normalized, dtype=np.float64)
        if normalized.shape[-1] != len(FIELDS):
            raise ShapeError(f"expected {len(FIELDS)} metadata fields, got {normalized.shape[-1]}")
        e = sinusoidal_embedding(normalized, self.field_dim)
        return e.reshape(normalized.shape[:-1] + (-1,))

    def forward(self, normalized) -> Tensor:
        """(N, 8) normalized metadata -> c_final of shape (N, 1, d)."""
        normalized = np.atleast_2d(normalized)
        h = T.Tensor(self.features(normalized).astype(T.default_dtype()))
        c = self.fc2(T.silu(self.fc1(h)))
        return T.reshape(c, (normalized.shape[0], 1, self.d))


def encode_records(records: list[MetadataRecord]) -> np.ndarray:
    return normalize(np.stack([r.values() for r in records]))


# ---------------------------------------------------------------------------
# U-Net blocks


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.channels, self.groups, self.eps = channels, groups, eps
        dtype = T.default_dtype()
        self.weight = T.Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.bias = T.Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        g = T.reshape(x, (n, self.groups, -1))
        centered = T.sub(g, T.mean(g, axis=-1, keepdims=True))
        var = T.mean(T.square(centered), axis=-1, keepdims=True)
        g = T.div(centered, T.sqrt(T.add(var, self.eps)))
        return T.add(T.mul(T.reshape(g, (n, c, h, w)), self.weight), self.bias)


class LatentProjection(Module):
    """Maps the quantized latent onto a feature map: 3x3 conv, then nearest upsampling to the target size."""

    def __init__(self, latent_channels: int, channels: int, rng=None):
        self.conv = Conv2d(latent_channels, channels, 3, 1, rng)

    def forward(self, y_hat: Tensor, size: tuple[int, int]) -> Tensor:
        (h, w), (lh, lw) = size, y_hat.shape[-2:]
        if h % lh or w % lw or h // lh != w // lw:
            raise ShapeError(f"latent {lh}x{lw} cannot be upsampled onto a {h}x{w} feature map")
        return T.upsample_nearest(self.conv(y_hat), h // lh)


def inject_latent(f: Tensor, y_hat: Tensor, proj: Callable) -> Tensor:
    """``f + proj(y_hat)``; the projection must reproduce ``f``'s shape exactly."""
    p = proj(y_hat, f.shape[-2:]) if isinstance(proj, LatentProjection) else proj(y_hat)
    if p.shape != f.shape:
        raise ShapeError(f"latent projection {p.shape} does not match feature map {f.shape}")
    return T.add(f, p)


class VCBlock(Module):
    """Residual conv block with time-embedding bias and latent injection."""

    def __init__(self, c_in: int, c_out: int, time_dim: int, latent_channels: int, groups: int, rng=None):
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv2d(c_in, c_out, 3, 1, rng)
        self.time_proj = Linear(time_dim, c_out, rng)
        self.inject = LatentProjection(latent_channels, c_out, rng)
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv2d(c_out, c_out, 3, 1, rng)
        self.skip = Conv2d(c_in, c_out, 1, 1, rng) if c_in != c_out else None

    def forward(self, x: Tensor, temb: Tensor, y_hat: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        n, c = h.shape[:2]
        h = T.add(h, T.reshape(self.time_proj(temb), (n, c, 1, 1)))
        h = inject_latent(h, y_hat, self.inject)
        h = self.conv2(T.silu(self.norm2(h)))
        return T.add(h, x if self.skip is None else self.skip(x))


class CABlock(Module):
    """Cross-attention from spatial queries to the condition tokens, added residually."""

    def __init__(self, channels: int, cond_dim: int, groups: int, rng=None):
        self.channels = channels
        self.norm = GroupNorm(channels, groups)
        self.q = Linear(channels, channels, rng, bias=False)
        self.k = Linear(cond_dim, channels, rng, bias=False)
        self.v = Linear(cond_dim, channels, rng, bias=False)
        self.out = Linear(channels, channels, rng)

    def attend(self, x: Tensor, c: Tensor) -> Tensor:
        n, ch, h, w = x.shape
        tokens = T.transpose(T.reshape(self.norm(x), (n, ch, h * w)), (0, 2, 1))
        q, k, v = self.q(tokens), self.k(c), self.v(c)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(ch))
        mixed = self.out(T.matmul(T.softmax(scores, axis=-1), v))
        return T.reshape(T.transpose(mixed, (0, 2, 1)), (n, ch, h, w))

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        return T.add(x, self.attend(x, c))


@dataclass
class DiffusionConfig:
    latent_channels: int = 192
    comp_channels: int = 4
    base_channels: int = 32
    cond_dim: int = 128
    field_dim: int = 16
    time_dim: int = 128
    groups: int = 8
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02

    def to_dict(self) -> dict:
        return asdict(self)


class UNet(Module):
    """Two-resolution noise predictor.

    full res:  conv_in -> VC(b)                                    -> [skip]
    half res:  down -> VC(2b) -> CA(2b)
    full res:  up -> concat skip -> VC(2b -> b) -> CA(b) -> conv_out
    """

    def __init__(self, cfg: DiffusionConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        b, g, td, m = cfg.base_channels, cfg.groups, cfg.time_dim, cfg.latent_channels
        self.cfg = cfg
        self.time_fc1 = Linear(td, td, rng)
        self.time_fc2 = Linear(td, td, rng)
        self.conv_in = Conv2d(cfg.comp_channels, b, 3, 1, rng)
        self.enc_full = VCBlock(b, b, td, m, g, rng)
        self.down = Conv2d(b, 2 * b, 3, 2, rng)
        self.enc_half = VCBlock(2 * b, 2 * b, td, m, g, rng)
        self.attn_half = CABlock(2 * b, cfg.cond_dim, g, rng)
        self.up = TransposedConv2d(2 * b, b, 3, 2, rng)
        self.dec_full = VCBlock(2 * b, b, td, m, g, rng)
        self.attn_full = CABlock(b, cfg.cond_dim, g, rng)
        self.norm_out = GroupNorm(b, g)
        self.conv_out = Conv2d(b, cfg.comp_channels, 3, 1, rng)

    def time_embedding(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t))
        e = T.Tensor(sinusoidal_embedding(t.astype(np.float64), self.cfg.time_dim).astype(T.default_dtype()))
        return self.time_fc2(T.silu(self.time_fc1(e)))

    def forward(self, z_t, t, y_hat, c: Tensor) -> Tensor:
        z_t, y_hat = T.as_tensor(z_t), T.as_tensor(y_hat)
        if z_t.ndim != 4 or y_hat.ndim != 4:
            raise ShapeError("U-Net expects batched (N, C, H, W) inputs")
        h, w = z_t.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(f"U-Net input {h}x{w} must be even")
        temb = self.time_embedding(np.broadcast_to(np.atleast_1d(t), (z_t.shape[0],)))
        x = self.conv_in(z_t)
        skip = self.enc_full(x, temb, y_hat)
        x = self.enc_half(self.down(skip), temb, y_hat)
        x = self.attn_half(x, c)
        x = self.up(x)
        x = self.dec_full(T.concat([x, skip], axis=1), temb, y_hat)
        x = self.attn_full(x, c)
        return self.conv_out(T.silu(self.norm_out(x)))


class DiffusionModel(Module):
    """Noise predictor plus metadata encoder, schedule and the latent normalization scale."""

    _buffers = ("latent_scale",)

    def __init__(self, cfg: DiffusionConfig | None = None, seed: int = 0):
        self.cfg = cfg or DiffusionConfig()
        rng = np.random.default_rng(seed)
        self.unet = UNet(self.cfg, rng)
        self.metadata_encoder = MetadataEncoder(self.cfg.cond_dim, self.cfg.field_dim, rng)
        self.schedule = make_schedule(self.cfg.T, self.cfg.beta_1, self.cfg.beta_T)
        self.latent_scale = 1.0

    def condition(self, normalized_metadata: np.ndarray | None, n: int) -> Tensor:
        """c_final for a batch; ``None`` yields an all-zero token (conditioning switched off)."""
        if normalized_metadata is None:
            return T.Tensor(np.zeros((n, 1, self.cfg.cond_dim), dtype=T.default_dtype()))
        c = self.metadata_encoder(normalized_metadata)
        if c.shape[0] != n:
            raise ShapeError(f"{c.shape[0]} metadata rows for a batch of {n}")
        return c

    def predict_noise(self, z_t, t, y_hat, c: Tensor) -> Tensor:
        return self.unet(z_t, t, y_hat, c)

    def forward(self, z_t, t, y_hat, normalized_metadata) -> Tensor:
        n = np.shape(z_t.data if isinstance(z_t, Tensor) else z_t)[0]
        return self.predict_noise(z_t, t, y_hat, self.condition(normalized_metadata, n))


def generate_compensation(
    y_hat,
    metadata: MetadataRecord | None,
    steps: int,
    seed: int,
    model: DiffusionModel,
    use_metadata: bool = True,
) -> np.ndarray:
    """Sample ``z0'`` (comp_channels, 4h, 4w) for one dequantized latent (C, h, w)."""
    if hasattr(y_hat, "symbols"):
        raise TypeError("pass the dequantized latent (EntropyModel.reconstruct), not a LatentCode")
    y = np.asarray(y_hat, dtype=T.default_dtype())
    if y.ndim != 3:
        raise ShapeError(f"expected a single (C, h, w) latent, got {y.shape}")
    y = y[None]
    meta = metadata.normalized()[None] if (use_metadata and metadata is not None) else None
    shape = (1, model.cfg.comp_channels, 4 * y.shape[-2], 4 * y.shape[-1])
    with T.no_grad():
        c = model.condition(meta, 1)

        def eps_fn(z: np.ndarray, t: int) -> np.ndarray:
            z32 = z.astype(T.default_dtype())
            return model.predict_noise(z32, np.array([t]), y, c).data

        z0 = ddim_sample(eps_fn, shape, model.schedule, steps, seed)
    return (z0[0] * model.latent_scale).astype(T.default_dtype())
