import pytest
import torch

from shadowpeft.errors import ConfigError
from shadowpeft.prompt_net import (EFFICIENTNET_B1, TINY, BackboneDescriptor,
                                   CoarseMaskPredictor, ConvBlock,
                                   DecoderConfig, PyramidDecoder,
                                   TinyBackbone, build_backbone,
                                   channel_schedule)


def test_descriptor_validation():
    with pytest.raises(ConfigError):
        BackboneDescriptor("bad", (8, 12, 16))
    with pytest.raises(ConfigError):
        build_backbone("resnet50")


def test_efficientnet_channel_contract():
    assert EFFICIENTNET_B1.channels == (16, 24, 40, 112, 1280)
    assert EFFICIENTNET_B1.strides == (2, 4, 8, 16, 32)


def test_channel_schedule():
    assert channel_schedule(DecoderConfig(top_channels=128)) == [128, 64, 42, 32, 25]
    assert channel_schedule(DecoderConfig(top_channels=32)) == [32, 16, 10, 8, 8]
    with pytest.raises(ConfigError):
        DecoderConfig(top_channels=4)


def test_tiny_backbone_stride_arithmetic():
    torch.manual_seed(0)
    net = TinyBackbone()
    levels = net(torch.randn(2, 3, 64, 64))
    assert [l.shape for l in levels] == [
        (2, c, 64 // s, 64 // s)
        for c, s in zip(TINY.channels, TINY.strides)
    ]


def test_full_resolution_stride_chain():
    torch.manual_seed(0)
    net = TinyBackbone()
    levels = net(torch.randn(1, 3, 1024, 1024))
    assert [l.shape[-1] for l in levels] == [512, 256, 128, 64, 32]


def test_decoder_step_concat_width():
    torch.manual_seed(0)
    dec = PyramidDecoder(EFFICIENTNET_B1, DecoderConfig(top_channels=128))
    # first recurrence: 128-channel top + 112-channel skip -> 240 in, 64 out
    assert dec.blocks[0].body[0].in_channels == 240
    assert dec.blocks[0].body[0].out_channels == 64
    d = torch.randn(1, 128, 32, 32)
    skip = torch.randn(1, 112, 64, 64)
    out = dec.step(d, skip, 0)
    assert out.shape == (1, 64, 64, 64)


def test_decoder_resolution_doubles_each_step():
    torch.manual_seed(0)
    net = TinyBackbone()
    dec = PyramidDecoder(TINY, DecoderConfig(top_channels=32))
    levels = net(torch.randn(1, 3, 64, 64))
    d = dec.top(levels[-1])
    sizes = [d.shape[-1]]
    for i in range(4):
        d = dec.step(d, levels[-2 - i], i)
        sizes.append(d.shape[-1])
    assert sizes == [2, 4, 8, 16, 32]


def test_constant_field_stays_constant_through_convblock():
    torch.manual_seed(0)
    block = ConvBlock(4, 6).eval()
    out = block(torch.full((1, 4, 10, 10), 0.7))
    # interior pixels (away from padding) must all be identical
    interior = out[..., 2:-2, 2:-2]
    assert torch.allclose(interior, interior[..., :1, :1].expand_as(interior))


def test_predictor_output_range_and_shape():
    torch.manual_seed(0)
    net = CoarseMaskPredictor(TinyBackbone(), DecoderConfig(top_channels=32),
                              input_size=64, mask_size=64)
    with torch.no_grad():
        out = net(torch.rand(2, 3, 64, 64))
    assert out.shape == (2, 64, 64)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
    with pytest.raises(ConfigError):
        net(torch.rand(1, 3, 32, 32))
    with pytest.raises(ConfigError):
        net(torch.rand(1, 1, 64, 64))


def test_zero_head_yields_half_probability():
    torch.manual_seed(0)
    net = CoarseMaskPredictor(TinyBackbone(), DecoderConfig(top_channels=32),
                              input_size=64, mask_size=64)
    with torch.no_grad():
        net.decoder.head.weight.zero_()
        net.decoder.head.bias.zero_()
    out = net(torch.rand(1, 3, 64, 64))
    assert torch.equal(out, torch.full_like(out, 0.5))


def test_decoder_is_differentiable():
    torch.manual_seed(0)
    net = CoarseMaskPredictor(TinyBackbone(), DecoderConfig(top_channels=8),
                              input_size=32, mask_size=32).double().eval()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    net(x).sum().backward()
    probe = [net.decoder.top.bias, net.decoder.head.weight,
             net.decoder.blocks[0].body[0].weight]
    eps = 1e-3
    for p in probe:
        flat = p.detach().view(-1)
        gflat = p.grad.view(-1)
        i = 0
        with torch.no_grad():
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = net(x).sum().item()
            flat[i] = orig - eps
            lo = net(x).sum().item()
            flat[i] = orig
        fd = (hi - lo) / (2 * eps)
        rel = abs(gflat[i].item() - fd) / max(abs(fd), 1e-8)
        assert rel < 1e-2


def test_wrong_level_count_rejected():
    dec = PyramidDecoder(TINY, DecoderConfig(top_channels=32))
    with pytest.raises(ConfigError):
        dec([torch.randn(1, 8, 4, 4)] * 3, (16, 16))
