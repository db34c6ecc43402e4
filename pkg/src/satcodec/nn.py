"""Parameter containers and the basic layers shared by every network."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, add, default_dtype, softplus

BETA_MIN = 1e-6


class Module:
    """Minimal parameter tree: attributes holding Tensors, Modules or lists of Modules."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.op == "leaf" and _is_param(self, name):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        if strict and missing:
            raise KeyError(f"missing tensors in state: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()


def _is_param(module: Module, name: str) -> bool:
    return name not in getattr(module, "_buffers", ())


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(default_dtype()), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.weight = _normal(rng, (c_out, c_in, k, k), (1.0 / (c_in * k * k)) ** 0.5)
        self.bias = _zeros((c_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.k // 2)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel, stride: int = 1, rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.channels, self.kernel, self.stride = channels, (kh, kw), stride
        self.weight = _normal(rng, (channels, 1, kh, kw), (1.0 / (kh * kw)) ** 0.5)
        self.bias = _zeros((channels,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        kh, kw = self.kernel
        return F.depthwise_conv2d(x, self.weight, self.bias, self.stride, (kh // 2, kw // 2))


class TransposedConv2d(Module):
    """Stride-``s`` upsampling by exactly ``s`` (output_padding = s - 1, pad = k // 2)."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 2, rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        fan_in = c_in * k * k / (stride * stride)
        self.weight = _normal(rng, (c_in, c_out, k, k), (1.0 / fan_in) ** 0.5)
        self.bias = _zeros((c_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.transposed_conv2d(x, self.weight, self.bias, self.stride, self.k // 2, self.stride - 1)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _normal(rng, (d_in, d_out), (1.0 / d_in) ** 0.5)
        self.bias = _zeros((d_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else add(y, self.bias)


def _softplus_inv(v: np.ndarray) -> np.ndarray:
    return np.where(v > 20, v, np.log(np.expm1(np.maximum(v, 1e-12))))


class GDN(Module):
    """GDN / IGDN layer with positivity enforced by reparameterization.

    Stored values are unconstrained; ``beta = beta_min + softplus(beta_raw)`` and
    ``gamma = softplus(gamma_raw)``.
    """

    def __init__(self, channels: int, inverse: bool = False, gamma_init: float = 0.1, beta_min: float = BETA_MIN):
        self.channels, self.inverse, self.beta_min = channels, inverse, beta_min
        gamma = np.full((channels, channels), 1e-3) + (gamma_init - 1e-3) * np.eye(channels)
        self.beta_raw = Tensor(_softplus_inv(np.ones(channels) - beta_min).astype(default_dtype()), requires_grad=True)
        self.gamma_raw = Tensor(_softplus_inv(gamma).astype(default_dtype()), requires_grad=True)

    def beta(self) -> Tensor:
        return add(softplus(self.beta_raw), self.beta_min)

    def gamma(self) -> Tensor:
        return softplus(self.gamma_raw)

    def forward(self, x: Tensor) -> Tensor:
        return F.gdn(x, self.beta(), self.gamma(), inverse=self.inverse)
