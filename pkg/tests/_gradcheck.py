"""Finite-difference checks of the two training losses, shared by unit and acceptance tests."""

import numpy as np

from satcodec import Codec, CodecConfig
from satcodec import tensor as T
from satcodec.diffusion import DiffusionConfig, DiffusionModel
from satcodec.metadata import MetadataRecord
from satcodec.pipeline import reflect_pad
from satcodec.training import stage1_forward, stage2_step_loss

TOY_DIFFUSION = DiffusionConfig(latent_channels=8, comp_channels=4, base_channels=8, cond_dim=8, field_dim=2, time_dim=8, groups=4)


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _check(loss_fn, params: list[T.Tensor], per_tensor: int, seed: int, h: float = 1e-4) -> tuple[float, int]:
    """Worst relative error over ``per_tensor`` random coordinates of every tensor in ``params``."""
    loss = loss_fn()
    analytic = T.grad(loss, params)
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    for p, g in zip(params, analytic):
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            hi = loss_fn().item()
            flat[i] = old - h
            lo = loss_fn().item()
            flat[i] = old
            worst = max(worst, relative_error(float(gflat[i]), (hi - lo) / (2 * h)))
            checked += 1
    return worst, checked


def ic_gradient_error(per_tensor: int = 3, size: int = 8, lam: float = 0.0026, seed: int = 0) -> tuple[float, int]:
    """L_IC through encoder, noise quantizer, hyper-network, compensation encoder and decoder.

    A ``size`` x ``size`` x 3 image is reflect-padded to the codec's multiple of
    16 exactly as the pipeline does; the loss covers the original pixels only.
    """
    with T.precision(np.float64):
        codec = Codec(CodecConfig.small(8, 4), seed=seed)
        image = np.random.default_rng(seed).random((3, size, size))
        x = T.Tensor(reflect_pad(image)[None], requires_grad=True)

        def loss_fn():
            rng = np.random.default_rng(seed + 1)
            return stage1_forward(codec, x, lam, rng, decoder_input="noise", valid=(size, size))[0]

        return _check(loss_fn, [x] + codec.parameters(), per_tensor, seed)


def ldm_gradient_error(per_tensor: int = 3, seed: int = 0) -> tuple[float, int]:
    """L_ldm through the toy U-Net, metadata encoder and cross-attention."""
    with T.precision(np.float64):
        model = DiffusionModel(TOY_DIFFUSION, seed=seed)
        rng = np.random.default_rng(seed)
        z0 = rng.standard_normal((2, 4, 8, 8))
        latents = rng.integers(-3, 4, (2, 8, 2, 2)).astype(np.float64)
        meta = np.stack([MetadataRecord(sun_elevation=30.0).normalized(), MetadataRecord(gsd=2.0).normalized()])
        t, eps = np.array([17, 640]), rng.standard_normal(z0.shape)

        def loss_fn():
            return stage2_step_loss(model, z0, latents, meta, t, eps)

        return _check(loss_fn, model.parameters(), per_tensor, seed)
