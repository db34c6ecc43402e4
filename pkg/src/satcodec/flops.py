"""Analytic multiply-accumulate counts for the on-board path.

Conventions, applied identically to every network:

* dense conv: ``C_out * H' * W' * C_in * kh * kw``
* depthwise conv: ``C * H' * W' * kh * kw``
* transposed conv: the dense formula on its output grid,
  ``C_out * H' * W' * C_in * k * k`` (multiplications by the inserted zeros
  included); ``input_positions=True`` counts only the scattered products,
  ``C_in * H * W * C_out * k * k``
* GDN / IGDN: the channel-mixing sum, ``C^2 * H * W``
* activations, elementwise products, biases and pooling are free

One MAC is two FLOPs.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .codec import CAM, LCB, CodecConfig, Encoder
from .entropy import HyperDecoder, HyperEncoder
from .functional import out_size
from .nn import GDN, Conv2d, DepthwiseConv2d, Module, TransposedConv2d

FLOPS_PER_MAC = 2


@dataclass(frozen=True)
class LayerCount:
    name: str
    component: str
    kind: str
    out_shape: tuple[int, int, int]
    macs: int


@dataclass
class FlopsReport:
    layers: list[LayerCount] = field(default_factory=list)
    input_shape: tuple[int, int] = (0, 0)

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def total_flops(self) -> int:
        return FLOPS_PER_MAC * self.total_macs

    def by_component(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for layer in self.layers:
            out[layer.component] += layer.macs
        return dict(out)

    def component_macs(self, component: str) -> int:
        return self.by_component().get(component, 0)

    def table(self) -> str:
        lines = [f"{'layer':48s} {'kind':10s} {'output':>16s} {'MACs':>15s}"]
        for layer in self.layers:
            shape = "x".join(map(str, layer.out_shape))
            lines.append(f"{layer.component + '.' + layer.name:48s} {layer.kind:10s} {shape:>16s} {layer.macs:15,d}")
        for comp, macs in self.by_component().items():
            lines.append(f"{'total ' + comp:48s} {'':10s} {'':>16s} {macs:15,d}")
        lines.append(f"{'total':48s} {'':10s} {'':>16s} {self.total_macs:15,d}")
        lines.append(f"FLOPs (1 MAC = {FLOPS_PER_MAC} FLOPs): {self.total_flops / 1e9:.3f} G")
        return "\n".join(lines)


class _Counter:
    def __init__(self, report: FlopsReport, component: str, input_positions: bool = False):
        self.report, self.component, self.input_positions = report, component, input_positions

    def add(self, name: str, kind: str, shape, macs: int) -> None:
        self.report.layers.append(LayerCount(name, self.component, kind, tuple(int(s) for s in shape), int(macs)))

    def count(self, module: Module, shape: tuple[int, int, int], name: str) -> tuple[int, int, int]:
        c, h, w = shape
        if isinstance(module, Conv2d):
            if c != module.c_in:
                raise ValueError(f"{name}: input has {c} channels, layer expects {module.c_in}")
            p = module.k // 2
            ho, wo = out_size(h, module.k, module.stride, p), out_size(w, module.k, module.stride, p)
            out = (module.c_out, ho, wo)
            self.add(name, "conv", out, module.c_out * ho * wo * module.c_in * module.k**2)
            return out
        if isinstance(module, DepthwiseConv2d):
            kh, kw = module.kernel
            ho, wo = out_size(h, kh, module.stride, kh // 2), out_size(w, kw, module.stride, kw // 2)
            out = (c, ho, wo)
            self.add(name, "depthwise", out, c * ho * wo * kh * kw)
            return out
        if isinstance(module, TransposedConv2d):
            out = (module.c_out, h * module.stride, w * module.stride)
            positions = h * w if self.input_positions else out[1] * out[2]
            self.add(name, "tconv", out, module.c_in * positions * module.c_out * module.k**2)
            return out
        if isinstance(module, GDN):
            self.add(name, "igdn" if module.inverse else "gdn", shape, c * c * h * w)
            return shape
        if isinstance(module, LCB):
            s = self.count(module.depthwise, shape, name + ".depthwise")
            s = self.count(module.pointwise, s, name + ".pointwise")
            self.count(module.cheap, s, name + ".cheap")
            return (module.c_out,) + s[1:]
        if isinstance(module, CAM):
            out = self.count(module.local, shape, name + ".local")
            s = self.count(module.horiz, shape, name + ".horiz")
            self.count(module.vert, s, name + ".vert")
            return out
        if isinstance(module, Encoder):
            s = shape
            for i, stage in enumerate(module.stages):
                s = self.count(stage, s, f"stages.{i}")
            return self.count(module.project, s, "project")
        if isinstance(module, HyperEncoder):
            s = self.count(module.conv1, shape, "conv1")
            return self.count(module.conv2, s, "conv2")
        if isinstance(module, HyperDecoder):
            s = self.count(module.up1, shape, "up1")
            return self.count(module.up2, s, "up2")
        if isinstance(module, ReferenceEncoder):
            s = shape
            for i, (conv, gdn) in enumerate(zip(module.convs, module.gdns)):
                s = self.count(conv, s, f"conv{i + 1}")
                s = self.count(gdn, s, f"gdn{i + 1}")
            return s
        raise TypeError(f"no MAC rule for {type(module).__name__}")


class ReferenceEncoder(Module):
    """Dense comparison encoder: four [5x5 stride-2 conv + GDN] stages at constant width."""

    def __init__(self, channels: int = 192, stages: int = 4, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.convs = [Conv2d(3 if i == 0 else channels, channels, 5, 2, rng) for i in range(stages)]
        self.gdns = [GDN(channels) for _ in range(stages)]

    def forward(self, x):
        for conv, gdn in zip(self.convs, self.gdns):
            x = gdn(conv(x))
        return x


def count_module(module: Module, shape: tuple[int, int, int], component: str = "model", input_positions: bool = False) -> FlopsReport:
    report = FlopsReport(input_shape=tuple(shape[1:]))
    _Counter(report, component, input_positions).count(module, tuple(shape), component)
    return report


def flops_count(
    cfg: CodecConfig | None = None,
    height: int = 256,
    width: int = 256,
    include_hyper_decoder: bool = True,
    input_positions: bool = False,
) -> FlopsReport:
    """MACs of the on-board path: encoder, hyper-encoder and (optionally) the hyper-decoder.

    The hyper-decoder runs on board because the encoder needs the Gaussian
    parameters to range-code the latent; it is reported as its own component
    so totals with and without it can both be read off.
    """
    cfg = cfg or CodecConfig()
    enc = Encoder(cfg)
    hyper_enc = HyperEncoder(cfg.latent_channels, cfg.hyper_channels)
    report = FlopsReport(input_shape=(height, width))
    latent = _Counter(report, "encoder").count(enc, (3, height, width), "encoder")
    zeta = _Counter(report, "hyper_encoder").count(hyper_enc, latent, "hyper_encoder")
    if include_hyper_decoder:
        _Counter(report, "hyper_decoder", input_positions).count(HyperDecoder(cfg.latent_channels, cfg.hyper_channels), zeta, "hyper_decoder")
    return report


def reference_flops(height: int = 256, width: int = 256, channels: int = 192) -> FlopsReport:
    report = FlopsReport(input_shape=(height, width))
    _Counter(report, "reference_encoder").count(ReferenceEncoder(channels), (3, height, width), "reference_encoder")
    return report


def encoder_ratio(cfg: CodecConfig | None = None, height: int = 256, width: int = 256) -> float:
    """Reference dense encoder MACs divided by lightweight encoder MACs."""
    cfg = cfg or CodecConfig()
    light = flops_count(cfg, height, width, include_hyper_decoder=False).component_macs("encoder")
    return reference_flops(height, width, cfg.channels).total_macs / light
