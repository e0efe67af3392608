"""Bottleneck adapters and their insertion into a frozen transformer encoder.

Each transformer layer receives two adapters: one added after the
multi-head attention output (the attention residual is kept), and a scaled
one that replaces the identity shortcut of the feed-forward sub-block:

    y = attn(norm1(x));  x = x + y + adapter1(y)
    out = mlp(norm2(x)) + scale * adapter2(x)

With adapter1's up-projection at zero the attention sub-block reduces
exactly to the unadapted layer; with adapter2's up-projection at zero the
feed-forward shortcut is removed entirely.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class AdapterConfig:
    channels: int
    ratio: float = 0.25
    scale: float = 1.0

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError("ratio must lie in (0,1)")
        # Non-integer ratio * channels is resolved by floor().
        if math.floor(self.ratio * self.channels) < 1:
            raise ConfigError(
                f"floor(ratio*channels) = {math.floor(self.ratio * self.channels)} < 1"
            )
        if self.scale <= 0.0:
            raise ConfigError("scale must be positive")

    @property
    def hidden(self):
        return math.floor(self.ratio * self.channels)


class Adapter(nn.Module):
    """Down-project, GELU, up-project; input and output widths are equal."""

    def __init__(self, cfg: AdapterConfig, zero_init_up=False):
        super().__init__()
        self.cfg = cfg
        self.down = nn.Linear(cfg.channels, cfg.hidden)
        self.act = nn.GELU()
        self.up = nn.Linear(cfg.hidden, cfg.channels)
        nn.init.normal_(self.down.weight, std=0.01)
        nn.init.zeros_(self.down.bias)
        nn.init.zeros_(self.up.bias)
        if zero_init_up:
            nn.init.zeros_(self.up.weight)
        else:
            nn.init.normal_(self.up.weight, std=0.01)

    def forward(self, x):
        if x.shape[-1] != self.cfg.channels:
            raise ConfigError(
                f"adapter expects {self.cfg.channels} channels, got {x.shape[-1]}"
            )
        return self.up(self.act(self.down(x)))


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    """Plain multi-head self-attention over (B, N, C) tokens."""

    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class AdaptedTransformerLayer(nn.Module):
    """Pre-norm transformer layer with the two adapter insertions.

    ``use_adapter_mha`` / ``use_adapter_ffn`` toggle each insertion; a
    disabled slot falls back to the plain residual form.
    """

    def __init__(self, dim, num_heads, mlp_ratio=4.0, adapter_cfg=None,
                 use_adapter_mha=True, use_adapter_ffn=True, layer_index=0):
        super().__init__()
        self.layer_index = layer_index
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        if adapter_cfg is None:
            adapter_cfg = AdapterConfig(channels=dim)
        if adapter_cfg.channels != dim:
            raise ConfigError(
                f"adapter channels {adapter_cfg.channels} != layer width {dim}"
            )
        self.adapter_scale = adapter_cfg.scale
        self.adapter1 = Adapter(adapter_cfg) if use_adapter_mha else None
        # Zero-init up-projection: training starts from the unadapted path.
        self.adapter2 = Adapter(adapter_cfg, zero_init_up=True) if use_adapter_ffn else None

    def forward(self, x):
        y = self.attn(self.norm1(x))
        if self.adapter1 is not None:
            x = x + y + self.adapter1(y)
        else:
            x = x + y
        f = self.mlp(self.norm2(x))
        if self.adapter2 is not None:
            out = f + self.adapter_scale * self.adapter2(x)
        else:
            out = f + x
        if not torch.isfinite(out).all():
            raise NumericError(
                f"non-finite activations in transformer layer {self.layer_index}"
            )
        return out


class LayerNorm2d(nn.Module):
    def __init__(self, num_channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


@dataclass(frozen=True)
class EncoderSpec:
    img_size: int = 1024
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    out_channels: int = 256
    adapter_ratio: float = 0.25
    adapter_scale: float = 1.0
    use_adapter_mha: bool = True
    use_adapter_ffn: bool = True
    pixel_mean: tuple = (0.485, 0.456, 0.406)
    pixel_std: tuple = (0.229, 0.224, 0.225)


def vit_b_spec(**overrides):
    return EncoderSpec(**overrides)


def toy_encoder_spec(**overrides):
    defaults = dict(
        img_size=64, patch_size=8, embed_dim=64, depth=2, num_heads=4,
        mlp_ratio=2.0, out_channels=64,
        pixel_mean=(0.5, 0.5, 0.5), pixel_std=(0.5, 0.5, 0.5),
    )
    defaults.update(overrides)
    return EncoderSpec(**defaults)


class AdaptedImageEncoder(nn.Module):
    """ViT-style image encoder whose layers carry the trainable adapters.

    Outputs a (B, out_channels, H/patch, W/patch) embedding grid via a 1x1
    neck. The base weights (everything but the adapters) are meant to be
    frozen; real checkpoints load through ``load_base_state``.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        if spec.img_size % spec.patch_size != 0:
            raise ConfigError("img_size must be divisible by patch_size")
        self.spec = spec
        side = spec.img_size // spec.patch_size
        self.patch_embed = nn.Conv2d(3, spec.embed_dim, spec.patch_size, spec.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, side * side, spec.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        acfg = AdapterConfig(spec.embed_dim, spec.adapter_ratio, spec.adapter_scale)
        self.blocks = nn.ModuleList(
            AdaptedTransformerLayer(
                spec.embed_dim, spec.num_heads, spec.mlp_ratio, acfg,
                use_adapter_mha=spec.use_adapter_mha,
                use_adapter_ffn=spec.use_adapter_ffn,
                layer_index=i,
            )
            for i in range(spec.depth)
        )
        self.neck = nn.Sequential(
            nn.Conv2d(spec.embed_dim, spec.out_channels, 1, bias=False),
            LayerNorm2d(spec.out_channels),
        )

    @property
    def embedding_side(self):
        return self.spec.img_size // self.spec.patch_size

    def forward(self, x):
        b, c, h, w = x.shape
        if h != self.spec.img_size or w != self.spec.img_size:
            raise ConfigError(
                f"encoder expects {self.spec.img_size}x{self.spec.img_size} input, got {h}x{w}"
            )
        x = self.patch_embed(x)  # (B, D, h, w)
        side = x.shape[-1]
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = x.transpose(1, 2).reshape(b, -1, side, side)
        return self.neck(x)

    def load_base_state(self, state_dict):
        """Load published encoder weights; adapter entries stay untouched."""
        missing, unexpected = self.load_state_dict(state_dict, strict=False)
        non_adapter = [k for k in missing if "adapter" not in k]
        if non_adapter or unexpected:
            raise ConfigError(
                f"checkpoint mismatch: missing {non_adapter}, unexpected {list(unexpected)}"
            )
