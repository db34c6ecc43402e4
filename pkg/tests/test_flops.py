import numpy as np
import pytest

from satcodec import Codec, CodecConfig
from satcodec import tensor as T
from satcodec.flops import FLOPS_PER_MAC, count_module, encoder_ratio, flops_count, reference_flops


def test_first_reference_conv():
    report = reference_flops()
    first = report.layers[0]
    assert first.out_shape == (192, 128, 128)
    assert first.macs == 192 * 128 * 128 * 3 * 5 * 5 == 235_929_600


def test_totals_are_sums_of_layers():
    report = flops_count()
    assert report.total_macs == sum(layer.macs for layer in report.layers)
    assert report.total_flops == FLOPS_PER_MAC * report.total_macs
    assert sum(report.by_component().values()) == report.total_macs
    assert set(report.by_component()) == {"encoder", "hyper_encoder", "hyper_decoder"}
    assert "1 MAC = 2 FLOPs" in report.table()


@pytest.mark.parametrize("side", [256, 512])
def test_lightweight_encoder_is_at_least_2_5x_cheaper(side):
    assert encoder_ratio(height=side, width=side) >= 2.5


def test_counts_scale_with_area():
    a, b = flops_count(height=256, width=256), flops_count(height=512, width=512)
    assert b.total_macs == 4 * a.total_macs
    c = flops_count(height=256, width=512)
    assert c.total_macs == 2 * a.total_macs


def test_hyper_decoder_toggle_and_convention():
    full = flops_count()
    without = flops_count(include_hyper_decoder=False)
    assert without.total_macs == full.total_macs - full.component_macs("hyper_decoder")
    scattered = flops_count(input_positions=True)
    assert scattered.component_macs("hyper_decoder") * 4 == full.component_macs("hyper_decoder")
    assert scattered.component_macs("encoder") == full.component_macs("encoder")


def test_shapes_agree_with_a_real_forward_pass():
    cfg = CodecConfig.small(8, 4)
    codec = Codec(cfg, seed=0)
    with T.no_grad():
        y = codec.encoder(np.zeros((1, 3, 64, 96), dtype=np.float32))
    report = count_module(codec.encoder, (3, 64, 96), "encoder")
    assert report.layers[-1].out_shape == y.shape[1:]


def test_unknown_modules_are_refused():
    class Odd(T.Tensor):
        pass

    with pytest.raises(TypeError):
        count_module(Odd(np.zeros(1)), (3, 8, 8))
