"""Two-stage training: rate-distortion training of the codec, then the frozen-codec diffusion stage."""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .codec import Codec, reparameterize
from .diffusion import DiffusionModel, encode_records, forward_diffuse
from .metadata import FIELD_RANGES, MetadataRecord
from .nn import Module
from .tensor import Tensor

log = logging.getLogger(__name__)

LAMBDAS = (0.00067, 0.0013, 0.0026, 0.005)
PIXEL_SCALE = 255.0


class TrainingDivergedError(FloatingPointError):
    """The loss became non-finite."""


class FrozenParameterError(RuntimeError):
    """A parameter that should be frozen received a gradient."""


@dataclass
class TrainConfig:
    lam: float = LAMBDAS[1]
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 1000
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None
    metadata_mode: str = "true"
    precompute: bool = True
    decoder_input: str = "ste"
    comp_kl: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.lr <= 0 or self.comp_kl < 0:
            raise ValueError("need lambda >= 0, lr > 0 and comp_kl >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("need batch_size >= 1 and steps >= 0")
        if self.decoder_input not in ("ste", "noise"):
            raise ValueError(f"decoder_input must be ste|noise, got {self.decoder_input!r}")
        if self.metadata_mode not in ("true", "shuffled", "none"):
            raise ValueError(f"metadata_mode must be true|shuffled|none, got {self.metadata_mode!r}")


class Adam:
    """Adam with bias correction; parameters whose ``grad`` is None are skipped."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        step_size = self.lr * math.sqrt(c2) / c1
        eps = self.eps * math.sqrt(c2)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            denom = np.sqrt(v)
            denom += eps
            np.divide(m, denom, out=denom)
            denom *= step_size
            p.data = p.data - denom.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# losses


def mse_255(x, x_hat: Tensor) -> Tensor:
    """Mean squared error on the 0..255 pixel scale."""
    return T.mul(T.mean(T.square(T.sub(x_hat, T.as_tensor(x)))), PIXEL_SCALE**2)


def _pixels(x) -> int:
    shape = np.shape(x.data if isinstance(x, Tensor) else x)
    return math.prod(shape[:-3]) * shape[-2] * shape[-1] if len(shape) > 3 else shape[-2] * shape[-1]


def loss_ic(x, x_hat: Tensor, rate_bits: Tensor, lam: float) -> tuple[Tensor, Tensor, Tensor]:
    """Rate-distortion loss ``R + lambda * D``.

    ``R`` is the total bit estimate divided by the pixel count of the batch
    (bits per pixel) and ``D`` is the MSE on 0..255 pixels, the scaling under
    which the published lambda values balance the two terms.

    Returns (loss, bpp, distortion).
    """
    bpp = T.mul(rate_bits, 1.0 / _pixels(x))
    distortion = mse_255(x, x_hat)
    if lam == 0:
        return bpp, bpp, distortion
    return T.add(bpp, T.mul(distortion, lam)), bpp, distortion


def comp_kl_bits(mu: Tensor, sigma: Tensor) -> Tensor:
    """``KL(N(mu, sigma^2) || N(0, 1))`` summed over all elements, in bits."""
    nats = T.sub(T.add(T.square(mu), T.square(sigma)), T.add(T.mul(T.log(sigma), 2.0), 1.0))
    return T.mul(T.tsum(nats), 0.5 / math.log(2.0))


def stage1_forward(
    codec: Codec,
    x,
    lam: float,
    rng: np.random.Generator,
    decoder_input: str = "ste",
    valid: tuple[int, int] | None = None,
    comp_kl: float = 1.0,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Full training path: encoder, quantizer, hyper-network, compensation encoder, decoder.

    The rate term always sees the noise proxy. ``decoder_input`` picks what
    the synthesis side sees: ``"ste"`` feeds it ``mu + round(y - mu)`` with a
    straight-through gradient, exactly the latent the decoder gets after
    entropy decoding; ``"noise"`` feeds it the noisy latent, the fully
    differentiable variant used for finite-difference checks.

    ``valid`` is the (height, width) of the real image inside a padded input:
    distortion and the bpp denominator then cover only those pixels, which
    is how images smaller than the downsampling factor are trained on.

    The compensation latent is read from the original image, so nothing in
    ``R + lambda * D`` limits what it carries; left alone the decoder learns
    to rebuild the image from ``z0`` and the coded latent collapses to its
    mean. ``comp_kl`` prices ``z0`` like coded bits: its KL divergence to the
    unit Gaussian, in bits per pixel, is added to the loss with that weight.
    The diffusion stage then has to generate a ``z0`` close to that prior.

    Returns (loss, bpp, distortion, compensation KL in bits per pixel).
    """
    x = T.as_tensor(x)
    y = codec.encoder(x)
    y_tilde, main_bits, hyper_bits, y_mean = codec.entropy.train_pass(y, rng)
    mu, sigma = codec.comp_encoder(x)
    z0 = reparameterize(mu, sigma, rng.standard_normal(mu.shape).astype(mu.dtype))
    if decoder_input == "ste":
        y_dec = T.add(y_mean, T.straight_through_round(T.sub(y, y_mean)))
    elif decoder_input == "noise":
        y_dec = y_tilde
    else:
        raise ValueError(f"decoder_input must be ste|noise, got {decoder_input!r}")
    x_hat = codec.decoder(y_dec, z0)
    if valid is not None:
        region = (Ellipsis, slice(0, valid[0]), slice(0, valid[1]))
        x, x_hat = T.getitem(x, region), T.getitem(x_hat, region)
    loss, bpp, distortion = loss_ic(x, x_hat, T.add(main_bits, hyper_bits), lam)
    kl_bpp = T.mul(comp_kl_bits(mu, sigma), 1.0 / _pixels(x))
    if comp_kl:
        loss = T.add(loss, T.mul(kl_bpp, comp_kl))
    return loss, bpp, distortion, kl_bpp


def loss_ldm(eps, eps_hat: Tensor) -> Tensor:
    """Mean squared error between the injected and the predicted noise."""
    return T.mean(T.square(T.sub(eps_hat, T.as_tensor(eps))))


# ---------------------------------------------------------------------------
# logging / checkpoints


class _JsonlLog:
    def __init__(self, path: str | None):
        self.fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _check_finite(value: float, step: int, stage: str, parts: dict) -> None:
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={v:.6g}" for k, v in parts.items())
        raise TrainingDivergedError(f"{stage} loss became non-finite at step {step} ({detail})")


@contextlib.contextmanager
def _diverged_at(step: int, stage: str):
    """Report a non-finite intermediate (forward or backward) as divergence at ``step``."""
    try:
        yield
    except T.NonFiniteError as exc:
        raise TrainingDivergedError(f"{stage} produced non-finite values at step {step}: {exc}") from exc


def _checkpoint(cfg: TrainConfig, step: int, save) -> None:
    if cfg.checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
        Path(cfg.checkpoint_path).write_bytes(save())


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Eval:
    bpp: float
    mse: float
    psnr: float


def evaluate_stage1(codec: Codec, images: np.ndarray) -> Stage1Eval:
    """Evaluation-mode rate (quantized latents, coder-model estimate) and distortion with ``z0 = mu_z``."""
    total_bits, sq = 0.0, 0.0
    with T.no_grad():
        for x in images:
            xt = T.Tensor(x[None])
            code, model = codec.entropy.quantize_latent(codec.encoder(xt)[0])
            total_bits += codec.entropy.rate_estimate(code, model)
            mu, _ = codec.comp_encoder(xt)
            x_hat = codec.decoder(codec.entropy.reconstruct(code, model)[None], mu).data
            sq += float(np.mean((np.clip(x_hat[0], 0, 1) * 255.0 - x * 255.0) ** 2))
    n = len(images)
    mse = sq / n
    pixels = n * images.shape[-2] * images.shape[-1]
    return Stage1Eval(total_bits / pixels, mse, 10 * math.log10(255.0**2 / mse) if mse > 0 else math.inf)


def stage1_train(images: np.ndarray, cfg: TrainConfig, codec: Codec | None = None) -> tuple[Codec, list[dict]]:
    """Train encoder, entropy model, compensation encoder and decoder jointly on ``images`` (N, 3, H, W)."""
    images = np.asarray(images, dtype=T.default_dtype())
    if images.ndim != 4 or images.shape[-1] % 16 or images.shape[-2] % 16:
        raise ValueError(f"stage 1 needs (N, 3, H, W) images with H, W divisible by 16, got {images.shape}")
    codec = codec or Codec(seed=cfg.seed)
    codec.unfreeze().train()
    opt = Adam(codec.parameters(), cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    logger = _JsonlLog(cfg.log_path)
    history: list[dict] = []
    try:
        for step in range(1, cfg.steps + 1):
            idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
            opt.zero_grad()
            with _diverged_at(step, "stage-1"):
                loss, bpp, dist, kl = stage1_forward(codec, images[idx], cfg.lam, rng, cfg.decoder_input, comp_kl=cfg.comp_kl)
                _check_finite(loss.item(), step, "stage-1", {"bpp": bpp.item(), "mse": dist.item()})
                T.backward(loss)
            opt.step()
            rec = {"step": step, "loss_ic": loss.item(), "rate_train_bpp": bpp.item(), "distortion_mse": dist.item(), "comp_kl_bpp": kl.item()}
            history.append(rec)
            if step % cfg.log_every == 0 or step == cfg.steps:
                logger.write(rec)
                log.info("stage1 step %d loss %.5g bpp %.4g mse %.4g", step, rec["loss_ic"], rec["rate_train_bpp"], rec["distortion_mse"])
            _checkpoint(cfg, step, lambda: save_bundle(codec, None, cfg))
    finally:
        logger.close()
    return codec, history


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Data:
    """Per-image inputs of the diffusion stage, derived from frozen stage-1 networks."""

    latents: np.ndarray  # (N, C, h, w) dequantized y
    mu: np.ndarray  # (N, k, 4h, 4w)
    sigma: np.ndarray
    metadata: np.ndarray  # (N, 8) normalized


def stage2_inputs(codec: Codec, images: np.ndarray, records: list[MetadataRecord]) -> Stage2Data:
    lat, mus, sigmas = [], [], []
    with T.no_grad():
        for x in np.asarray(images, dtype=T.default_dtype()):
            xt = T.Tensor(x[None])
            code, model = codec.entropy.quantize_latent(codec.encoder(xt)[0])
            mu, sigma = codec.comp_encoder(xt)
            lat.append(codec.entropy.reconstruct(code, model))
            mus.append(mu.data[0])
            sigmas.append(sigma.data[0])
    return Stage2Data(np.stack(lat), np.stack(mus), np.stack(sigmas), encode_records(records))


def _assert_frozen(codec: Codec) -> None:
    for name, p in codec.named_parameters():
        if p.requires_grad:
            raise FrozenParameterError(f"stage-1 parameter {name} is trainable during stage 2")
        if p.grad is not None and np.any(p.grad != 0):
            raise FrozenParameterError(f"stage-1 parameter {name} received a gradient (norm {np.linalg.norm(p.grad):.3g})")


def frozen_grad_norm(codec: Codec) -> float:
    return float(math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in codec.parameters() if p.grad is not None)))


def _conditioning(data: Stage2Data, idx: np.ndarray, mode: str, rng: np.random.Generator):
    if mode == "none":
        return None
    if mode == "shuffled":
        return data.metadata[rng.permutation(len(data.metadata))[idx]]
    return data.metadata[idx]


def stage2_step_loss(model: DiffusionModel, z0: np.ndarray, latents: np.ndarray, meta, t: np.ndarray, eps: np.ndarray) -> Tensor:
    z_t = forward_diffuse(z0, t, eps, model.schedule).astype(T.default_dtype())
    return loss_ldm(eps.astype(T.default_dtype()), model(z_t, t, latents, meta))


def evaluate_ldm(model: DiffusionModel, data: Stage2Data, seed: int = 1234, draws: int = 8, mode: str = "true") -> float:
    """Noise-prediction MSE over the whole set with fixed (t, eps) draws; lower is better.

    ``mode`` picks the conditioning as in training: the true records,
    records permuted across images (one fixed permutation per draw), or none.
    """
    if mode not in ("true", "shuffled", "none"):
        raise ValueError(f"mode must be true|shuffled|none, got {mode!r}")
    rng = np.random.default_rng(seed)
    n = len(data.latents)
    total = 0.0
    with T.no_grad():
        for _ in range(draws):
            t = rng.integers(1, model.schedule.T + 1, size=n)
            eps = rng.standard_normal(data.mu.shape)
            z0 = (data.mu + data.sigma * rng.standard_normal(data.mu.shape)) / model.latent_scale
            meta = _conditioning(data, np.arange(n), mode, rng)
            total += stage2_step_loss(model, z0, data.latents, meta, t, eps).item()
    return total / draws


def stage2_train(
    images: np.ndarray,
    records: list[MetadataRecord],
    codec: Codec,
    cfg: TrainConfig,
    model: DiffusionModel | None = None,
) -> tuple[DiffusionModel, list[dict]]:
    """Freeze ``codec`` and fit the noise predictor and metadata encoder.

    With ``cfg.precompute`` the frozen networks run once up front; otherwise
    the compensation encoder runs inside every step, and the frozen-gradient
    contract is checked after each backward pass either way.
    """
    images = np.asarray(images, dtype=T.default_dtype())
    if len(images) != len(records):
        raise ValueError(f"{len(images)} images but {len(records)} metadata records")
    codec.freeze()
    if model is None:
        from .diffusion import DiffusionConfig

        model = DiffusionModel(DiffusionConfig(latent_channels=codec.cfg.latent_channels, comp_channels=codec.cfg.comp_channels), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    data = stage2_inputs(codec, images, records)
    model.latent_scale = float(np.sqrt(np.mean(data.mu.astype(np.float64) ** 2 + data.sigma.astype(np.float64) ** 2))) or 1.0
    opt = Adam(model.parameters(), cfg.lr)
    logger = _JsonlLog(cfg.log_path)
    history: list[dict] = []
    _assert_frozen(codec)
    try:
        for step in range(1, cfg.steps + 1):
            idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
            if cfg.precompute:
                mu, sigma = data.mu[idx], data.sigma[idx]
            else:
                mu_t, sigma_t = codec.comp_encoder(T.Tensor(images[idx]))
                mu, sigma = mu_t.data, sigma_t.data
            z0 = (mu + sigma * rng.standard_normal(mu.shape)) / model.latent_scale
            t = rng.integers(1, model.schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(z0.shape)
            meta = _conditioning(data, idx, cfg.metadata_mode, rng)
            opt.zero_grad()
            with _diverged_at(step, "stage-2"):
                loss = stage2_step_loss(model, z0, data.latents[idx], meta, t, eps)
                _check_finite(loss.item(), step, "stage-2", {"t_mean": float(t.mean())})
                T.backward(loss)
            _assert_frozen(codec)
            opt.step()
            rec = {"step": step, "loss_ldm": loss.item(), "frozen_grad_norm": frozen_grad_norm(codec)}
            history.append(rec)
            if step % cfg.log_every == 0 or step == cfg.steps:
                logger.write(rec)
                log.info("stage2 step %d loss %.5g", step, rec["loss_ldm"])
            _checkpoint(cfg, step, lambda: save_bundle(codec, model, cfg))
    finally:
        logger.close()
    return model, history


def moving_average(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


# ---------------------------------------------------------------------------
# weight bundles


def save_bundle(codec: Codec, model: DiffusionModel | None, cfg: TrainConfig | None = None, lambda_index: int | None = None) -> bytes:
    from .bitstream import save_weights

    tensors = {f"codec.{k}": v for k, v in codec.state_dict().items()}
    config = {"codec": codec.cfg.to_dict(), "metadata_ranges": {k: list(v) for k, v in FIELD_RANGES.items()}}
    if cfg is not None:
        config["train"] = asdict(cfg)
        if lambda_index is None and cfg.lam in LAMBDAS:
            lambda_index = LAMBDAS.index(cfg.lam)
    config["lambda_index"] = lambda_index
    if model is not None:
        tensors.update({f"diffusion.{k}": v for k, v in model.state_dict().items()})
        config["diffusion"] = model.cfg.to_dict()
        config["latent_scale"] = model.latent_scale
    return save_weights(tensors, config)


def load_bundle(data: bytes) -> tuple[Codec, DiffusionModel | None, dict]:
    from .bitstream import FieldRangeError, load_weights
    from .codec import CodecConfig
    from .diffusion import DiffusionConfig

    tensors, config = load_weights(data)
    if not config or "codec" not in config:
        raise FieldRangeError("weights file carries no codec configuration")
    codec = Codec(CodecConfig(**config["codec"]))
    codec.load_state_dict(_strip(tensors, "codec."))
    model = None
    if "diffusion" in config:
        model = DiffusionModel(DiffusionConfig(**config["diffusion"]))
        model.load_state_dict(_strip(tensors, "diffusion."))
        model.latent_scale = float(config.get("latent_scale", 1.0))
    return codec, model, config


def _strip(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def trainable(module: Module) -> int:
    return sum(p.size for p in module.parameters() if p.requires_grad)
