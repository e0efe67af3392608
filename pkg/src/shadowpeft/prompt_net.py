"""Auxiliary coarse-mask network: pyramid backbone + progressive decoder.

The backbone extracts a 5-level feature pyramid at strides {2,4,8,16,32}.
The decoder starts from a 1x1 convolution on the top level and repeatedly
upsamples, concatenates the next skip and applies a ConvBlock (two 3x3
convolutions, each with BatchNorm and LeakyReLU). A 1-channel head plus
sigmoid yields the coarse shadow-probability mask.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShadowPeftError

STRIDES = (2, 4, 8, 16, 32)
NUM_LEVELS = 5


@dataclass(frozen=True)
class BackboneDescriptor:
    name: str
    channels: tuple  # 5 entries, finest to coarsest
    strides: tuple = STRIDES
    frozen: bool = True

    def __post_init__(self):
        if len(self.channels) != NUM_LEVELS or len(self.strides) != NUM_LEVELS:
            raise ConfigError("backbone descriptor needs exactly 5 levels")


EFFICIENTNET_B1 = BackboneDescriptor("efficientnet_b1", (16, 24, 40, 112, 1280))
TINY = BackboneDescriptor("tiny", (8, 12, 16, 24, 48), frozen=False)


@dataclass(frozen=True)
class DecoderConfig:
    top_channels: int = 128
    levels: int = NUM_LEVELS

    def __post_init__(self):
        if self.top_channels < self.levels:
            raise ConfigError("top_channels must be >= number of levels")


def channel_schedule(cfg: DecoderConfig):
    """Decoder output width per level (level 5 down to level 1)."""
    return [max(cfg.top_channels // (cfg.levels - i + 1), 8)
            for i in range(cfg.levels, 0, -1)]


class TinyBackbone(nn.Module):
    """Five stride-2 conv stages; the test-scale stand-in for a pretrained
    pyramid extractor."""

    def __init__(self, descriptor=TINY):
        super().__init__()
        self.descriptor = descriptor
        stages = []
        in_ch = 3
        for out_ch in descriptor.channels:
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.LeakyReLU(inplace=True),
            ))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class EfficientNetB1Backbone(nn.Module):
    """torchvision EfficientNet-B1 tapped at strides {2,4,8,16,32}.

    Channel list (16, 24, 40, 112, 1280). Weights load from an optional
    local checkpoint; otherwise the architecture is randomly initialized.
    """

    # features[] index -> pyramid level
    _TAPS = {1: 0, 2: 1, 3: 2, 5: 3, 8: 4}

    def __init__(self, descriptor=EFFICIENTNET_B1, weights_path=None):
        super().__init__()
        from torchvision.models import efficientnet_b1

        self.descriptor = descriptor
        net = efficientnet_b1(weights=None)
        if weights_path is not None:
            net.load_state_dict(torch.load(weights_path, map_location="cpu"), strict=False)
        self.features = net.features

    def forward(self, x):
        levels = []
        for i, stage in enumerate(self.features):
            x = stage(x)
            if i in self._TAPS:
                levels.append(x)
        return levels


def build_backbone(name, weights_path=None):
    if name == "tiny":
        return TinyBackbone()
    if name == "efficientnet_b1":
        return EfficientNetB1Backbone(weights_path=weights_path)
    raise ConfigError(f"unknown backbone {name!r}")


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.LeakyReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class PyramidDecoder(nn.Module):
    """Progressive decoder over a 5-level pyramid."""

    def __init__(self, descriptor: BackboneDescriptor, cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.cfg = cfg
        schedule = channel_schedule(cfg)  # widths for levels 5..1
        self.top = nn.Conv2d(descriptor.channels[-1], schedule[0], 1)
        blocks = []
        for step in range(1, cfg.levels):
            skip_ch = descriptor.channels[cfg.levels - 1 - step]
            blocks.append(ConvBlock(schedule[step - 1] + skip_ch, schedule[step]))
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(schedule[-1], 1, 1)

    def step(self, decoded, skip, index):
        """One decoder recurrence: upsample, concatenate the skip, ConvBlock."""
        up = F.interpolate(decoded, size=skip.shape[-2:], mode="bilinear",
                           align_corners=False)
        if up.shape[-2:] != skip.shape[-2:]:
            raise ShadowPeftError(
                f"spatial mismatch at decoder step {index}: {up.shape} vs {skip.shape}"
            )
        return self.blocks[index](torch.cat([up, skip], dim=1))

    def forward(self, levels, out_size):
        if len(levels) != self.cfg.levels:
            raise ConfigError(f"expected {self.cfg.levels} pyramid levels, got {len(levels)}")
        d = self.top(levels[-1])
        for index in range(len(self.blocks)):
            d = self.step(d, levels[-2 - index], index)
        logits = self.head(d)
        logits = F.interpolate(logits, size=out_size, mode="bilinear",
                               align_corners=False)
        return logits


class CoarseMaskPredictor(nn.Module):
    """Full coarse-mask path: pyramid encode then progressive decode.

    Returns probabilities in [0,1] of shape (B, mask_size, mask_size).
    """

    def __init__(self, backbone, decoder_cfg=DecoderConfig(), input_size=1024,
                 mask_size=256):
        super().__init__()
        self.backbone = backbone
        self.decoder = PyramidDecoder(backbone.descriptor, decoder_cfg)
        self.input_size = input_size
        self.mask_size = mask_size

    def pyramid_encode(self, image):
        b, c, h, w = image.shape
        if c != 3:
            raise ConfigError(f"expected a 3-channel image, got {c}")
        if h != self.input_size or w != self.input_size:
            raise ConfigError(
                f"expected {self.input_size}x{self.input_size} input, got {h}x{w}"
            )
        levels = self.backbone(image)
        expected = self.backbone.descriptor.channels
        got = tuple(l.shape[1] for l in levels)
        if got != tuple(expected):
            raise ConfigError(f"backbone channels {got} != descriptor {tuple(expected)}")
        return levels

    def forward(self, image):
        levels = self.pyramid_encode(image)
        logits = self.decoder(levels, (self.mask_size, self.mask_size))
        return torch.sigmoid(logits)[:, 0]


def export_mask_png(mask, path):
    """Save a coarse mask as 8-bit grayscale (value = round(255 * p))."""
    import numpy as np
    from PIL import Image

    arr = np.asarray(mask, dtype=np.float64)
    img = np.rint(255.0 * arr).clip(0, 255).astype("uint8")
    Image.fromarray(img, mode="L").save(path)
