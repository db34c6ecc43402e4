"""Quantization, hyperprior networks, likelihoods, rate estimation and payload coding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import tensor as T
from .nn import Conv2d, Module, TransposedConv2d
from .rangecoder import (
    SYMBOL_MAX,
    SYMBOL_MIN,
    DiscretizedGaussian,
    DiscretizedLogistic,
    decode_symbols,
    encode_symbols,
)
from .tensor import Tensor

SIGMA_MIN = 0.11
P_FLOOR = 2.0**-16


class QuantizationError(ValueError):
    """Rounded values fall outside the coder alphabet."""


@dataclass
class LatentCode:
    """Transmitted integers: latent residuals ``symbols`` (C, h, w) and hyper-latent ``hyper_symbols`` (C_h, h/4, w/4).

    ``symbols`` are ``round(y - mu)``; the reconstructed latent is ``mu + symbols``
    (see :meth:`EntropyModel.reconstruct`).
    """

    symbols: np.ndarray
    hyper_symbols: np.ndarray

    def __post_init__(self):
        for name in ("symbols", "hyper_symbols"):
            arr = np.asarray(getattr(self, name))
            if arr.size and (arr.min() < SYMBOL_MIN or arr.max() > SYMBOL_MAX):
                raise QuantizationError(f"{name} outside [-2^15, 2^15)")
            setattr(self, name, arr.astype(np.int32))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LatentCode)
            and np.array_equal(self.symbols, other.symbols)
            and np.array_equal(self.hyper_symbols, other.hyper_symbols)
        )


@dataclass
class GaussianParams:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64), SIGMA_MIN)
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ")

    def centered(self) -> "GaussianParams":
        """The zero-mean model under which mean-removed residuals are coded."""
        return GaussianParams(np.zeros_like(self.mu), self.sigma)


# ---------------------------------------------------------------------------
# quantization


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(y: Tensor, mode: str = "round", rng: np.random.Generator | None = None) -> Tensor:
    """``round``: nearest integer, ties away from zero (identity gradient).

    ``noise``: additive uniform noise on [-0.5, 0.5), the training proxy.
    """
    if mode == "noise":
        rng = rng if rng is not None else np.random.default_rng()
        u = rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype)
        return T.add(y, Tensor(u, dtype=y.dtype))
    if mode != "round":
        raise ValueError(f"unknown quantization mode {mode!r}")
    q = T.straight_through_round(y)
    low, high = q.data < SYMBOL_MIN, q.data > SYMBOL_MAX
    if low.any() or high.any():
        raise QuantizationError(
            f"{int(low.sum() + high.sum())} of {q.size} values saturate the alphabet "
            f"(min {q.data.min():.0f}, max {q.data.max():.0f}; allowed [{SYMBOL_MIN}, {SYMBOL_MAX}])"
        )
    return q


# ---------------------------------------------------------------------------
# likelihoods


def gaussian_likelihoods(symbols, mu, sigma, floor: bool = True) -> np.ndarray:
    """Vectorized ``Phi((s + .5 - mu)/sigma) - Phi((s - .5 - mu)/sigma)``."""
    s = np.asarray(symbols, dtype=np.float64)
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_MIN)
    v = np.abs(s - np.asarray(mu, dtype=np.float64))
    p = ndtr((0.5 - v) / sigma) - ndtr((-0.5 - v) / sigma)
    return np.maximum(p, P_FLOOR) if floor else p


def gaussian_likelihood(symbol: int, mu: float, sigma: float, floor: bool = True) -> float:
    return float(gaussian_likelihoods(np.array([symbol]), np.array([mu]), np.array([sigma]), floor)[0])


def logistic_likelihoods(symbols, loc, scale, floor: bool = True) -> np.ndarray:
    from scipy.special import expit

    v = np.abs(np.asarray(symbols, dtype=np.float64) - loc)
    p = expit((0.5 - v) / scale) - expit((-0.5 - v) / scale)
    return np.maximum(p, P_FLOOR) if floor else p


def gaussian_likelihood_t(y: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Differentiable Gaussian bin probability, floored at ``P_FLOOR``."""
    v = T.absolute(T.sub(y, mu))
    upper = T.normal_cdf(T.div(T.sub(0.5, v), sigma))
    lower = T.normal_cdf(T.div(T.sub(-0.5, v), sigma))
    return T.maximum(T.sub(upper, lower), P_FLOOR)


def bits(p: Tensor) -> Tensor:
    """Total information content ``sum(-log2 p)``."""
    return T.mul(T.tsum(T.log2(p)), -1.0)


def _sum_bits(p: np.ndarray) -> float:
    return math.fsum(-math.log2(v) for v in p.ravel().tolist())


# ---------------------------------------------------------------------------
# hyperprior


class FactorizedPrior(Module):
    """Per-channel logistic density for the hyper-latent."""

    def __init__(self, channels: int):
        self.channels = channels
        self.loc = Tensor(np.zeros(channels, dtype=T.default_dtype()), requires_grad=True)
        self.log_scale = Tensor(np.zeros(channels, dtype=T.default_dtype()), requires_grad=True)

    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.data.astype(np.float64))

    def likelihood(self, zeta: Tensor) -> Tensor:
        shape = (1, -1, 1, 1) if zeta.ndim == 4 else (-1, 1, 1)
        loc = T.reshape(self.loc, shape)
        scale = T.exp(T.reshape(self.log_scale, shape))
        v = T.absolute(T.sub(zeta, loc))
        upper = T.sigmoid(T.div(T.sub(0.5, v), scale))
        lower = T.sigmoid(T.div(T.sub(-0.5, v), scale))
        return T.maximum(T.sub(upper, lower), P_FLOOR)

    def coding_model(self, hyper_shape: tuple[int, ...]) -> DiscretizedLogistic:
        c = hyper_shape[0]
        if c != self.channels:
            raise ValueError(f"hyper-latent has {c} channels, prior has {self.channels}")
        reps = int(np.prod(hyper_shape[1:]))
        loc = np.repeat(self.loc.data.astype(np.float64), reps)
        return DiscretizedLogistic(loc, np.repeat(self.scale(), reps))

    def likelihoods(self, hyper_symbols: np.ndarray) -> np.ndarray:
        c = hyper_symbols.shape[0]
        loc = self.loc.data.astype(np.float64).reshape(c, 1, 1)
        return logistic_likelihoods(hyper_symbols, loc, self.scale().reshape(c, 1, 1))


class HyperEncoder(Module):
    def __init__(self, latent_channels: int, hyper_channels: int, rng=None):
        self.conv1 = Conv2d(latent_channels, hyper_channels, 5, 2, rng)
        self.conv2 = Conv2d(hyper_channels, hyper_channels, 5, 2, rng)

    def forward(self, y: Tensor) -> Tensor:
        return self.conv2(T.relu(self.conv1(T.absolute(y))))


class HyperDecoder(Module):
    def __init__(self, latent_channels: int, hyper_channels: int, rng=None):
        self.latent_channels = latent_channels
        self.up1 = TransposedConv2d(hyper_channels, hyper_channels, 5, 2, rng)
        self.up2 = TransposedConv2d(hyper_channels, 2 * latent_channels, 5, 2, rng)

    def forward(self, zeta_hat: Tensor, size: tuple[int, int] | None = None) -> tuple[Tensor, Tensor]:
        """Return (mu, sigma), cropped to ``size`` when the latent is not a multiple of 4."""
        out = self.up2(T.relu(self.up1(zeta_hat)))
        h, w = size if size is not None else out.shape[-2:]
        if h > out.shape[-2] or w > out.shape[-1]:
            raise ValueError(f"hyper-decoder output {out.shape[-2:]} smaller than latent {h}x{w}")
        m = self.latent_channels
        if out.ndim == 3:
            mu, raw = out[:m, :h, :w], out[m:, :h, :w]
        else:
            mu, raw = out[:, :m, :h, :w], out[:, m:, :h, :w]
        return mu, T.maximum(T.softplus(raw), SIGMA_MIN)


class EntropyModel(Module):
    """Hyper-encoder, hyper-decoder and factorized prior bundled for training and coding."""

    def __init__(self, latent_channels: int = 192, hyper_channels: int = 128, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hyper_encoder = HyperEncoder(latent_channels, hyper_channels, rng)
        self.hyper_decoder = HyperDecoder(latent_channels, hyper_channels, rng)
        self.prior = FactorizedPrior(hyper_channels)

    def forward(self, y: Tensor, rng: np.random.Generator):
        """Training pass: noise proxy on y and zeta; returns (y_tilde, main_bits, hyper_bits)."""
        return self.train_pass(y, rng)[:3]

    def train_pass(self, y: Tensor, rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Like :meth:`forward` but also returns the predicted mean ``mu``."""
        zeta = self.hyper_encoder(y)
        zeta_t = quantize(zeta, "noise", rng)
        mu, sigma = self.hyper_decoder(zeta_t, y.shape[-2:])
        y_t = quantize(y, "noise", rng)
        main_bits = bits(gaussian_likelihood_t(y_t, mu, sigma))
        hyper_bits = bits(self.prior.likelihood(zeta_t))
        return y_t, main_bits, hyper_bits, mu

    def hyper_encode(self, y: Tensor) -> Tensor:
        return self.hyper_encoder(y)

    def hyper_decode(self, zeta_hat, size: tuple[int, int] | None = None) -> GaussianParams:
        with T.no_grad():
            mu, sigma = self.hyper_decoder(T.as_tensor(np.asarray(zeta_hat, dtype=T.default_dtype())), size)
        return GaussianParams(mu.data, sigma.data)

    def quantize_latent(self, y: Tensor) -> tuple[LatentCode, GaussianParams]:
        """Quantize a single (C, h, w) latent given its hyperprior.

        ``zeta`` is rounded and decoded to (mu, sigma) first; the latent is then
        quantized relative to its predicted mean, ``round(y - mu)``, so the
        integers that are coded line up with the noise-proxy rate that training
        minimizes.
        """
        with T.no_grad():
            zeta_hat = quantize(self.hyper_encoder(y), "round")
            model = self.hyper_decode(zeta_hat.data, y.shape[-2:])
            residual = quantize(T.Tensor(np.asarray(y.data, dtype=np.float64) - model.mu, dtype=np.float64), "round")
        return LatentCode(residual.data, zeta_hat.data), model

    @staticmethod
    def reconstruct(code: LatentCode, model: GaussianParams) -> np.ndarray:
        """The dequantized latent ``mu + symbols`` that the decoder and the diffusion stage consume."""
        return (model.mu + code.symbols).astype(T.default_dtype())

    def encode(self, code: LatentCode, model: GaussianParams) -> tuple[bytes, bytes]:
        hyper = encode_symbols(code.hyper_symbols, self.prior.coding_model(code.hyper_symbols.shape))
        main = encode_symbols(code.symbols, DiscretizedGaussian(np.zeros_like(model.mu), model.sigma))
        return hyper, main

    def decode(self, hyper_payload: bytes, main_payload: bytes, latent_shape, hyper_shape) -> tuple[LatentCode, GaussianParams]:
        zeta = decode_symbols(hyper_payload, self.prior.coding_model(tuple(hyper_shape))).reshape(hyper_shape)
        model = self.hyper_decode(zeta, tuple(latent_shape)[-2:])
        if model.mu.shape != tuple(latent_shape):
            raise ValueError(f"hyper-decoder produced {model.mu.shape}, expected {tuple(latent_shape)}")
        residual = decode_symbols(main_payload, DiscretizedGaussian(np.zeros_like(model.mu), model.sigma)).reshape(latent_shape)
        return LatentCode(residual, zeta), model

    def rate_estimate(self, code: LatentCode, model: GaussianParams) -> float:
        """Estimated bits of ``code`` as coded: residuals under the zero-mean model plus the hyper-latent."""
        return rate_estimate(code, model.centered(), self.prior)


def rate_components(code: LatentCode, model: GaussianParams, prior: FactorizedPrior | None) -> tuple[float, float]:
    if model.mu.shape != code.symbols.shape:
        raise ValueError(f"model shape {model.mu.shape} does not match code shape {code.symbols.shape}")
    main = _sum_bits(gaussian_likelihoods(code.symbols, model.mu, model.sigma))
    hyper = 0.0 if prior is None or code.hyper_symbols.size == 0 else _sum_bits(prior.likelihoods(code.hyper_symbols))
    return main, hyper


def rate_estimate(code: LatentCode, model: GaussianParams, prior: FactorizedPrior | None) -> float:
    """Estimated bits: ``sum -log2 p(y|zeta) + sum -log2 p(zeta)``."""
    main, hyper = rate_components(code, model, prior)
    return main + hyper
