"""Promptable segmentation model and the full shadow-detection pipeline.

The image encoder (with adapters), a frozen prompt encoder and a
lightweight mask decoder mirror the foundation model's interfaces at a
configurable scale, so the whole pipeline runs at test scale without any
pretrained checkpoint and at full scale when one is available.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapters import AdaptedImageEncoder, EncoderSpec, LayerNorm2d, toy_encoder_spec, vit_b_spec
from .errors import ConfigError
from .prompt_net import (CoarseMaskPredictor, DecoderConfig, build_backbone)
from .sampling import SamplingConfig, assemble_prompts


class PositionEmbeddingRandom(nn.Module):
    """Random spatial frequencies; positional encoding for image and points."""

    def __init__(self, num_pos_feats=64, scale=1.0):
        super().__init__()
        self.register_buffer(
            "gaussian_matrix", scale * torch.randn(2, num_pos_feats)
        )

    def _encode(self, coords):
        coords = 2 * coords - 1
        coords = coords @ self.gaussian_matrix
        coords = 2 * math.pi * coords
        return torch.cat([torch.sin(coords), torch.cos(coords)], dim=-1)

    def forward(self, size):
        h, w = size
        device = self.gaussian_matrix.device
        grid = torch.ones(h, w, device=device)
        y = (grid.cumsum(0) - 0.5) / h
        x = (grid.cumsum(1) - 0.5) / w
        pe = self._encode(torch.stack([x, y], dim=-1))
        return pe.permute(2, 0, 1)  # (C, H, W)

    def encode_points(self, coords, input_size):
        c = coords.clone().to(self.gaussian_matrix.dtype)
        c[..., 0] = c[..., 0] / input_size
        c[..., 1] = c[..., 1] / input_size
        return self._encode(c)


class PromptEncoder(nn.Module):
    """Embeds point, box and dense-mask prompts; frozen during training."""

    def __init__(self, embed_dim, image_embedding_size, input_size, mask_in_chans=16):
        super().__init__()
        self.embed_dim = embed_dim
        self.image_embedding_size = image_embedding_size
        self.input_size = input_size
        self.pe_layer = PositionEmbeddingRandom(embed_dim // 2)
        # neg point, pos point, box corner 1, box corner 2
        self.point_embeddings = nn.ModuleList(
            nn.Embedding(1, embed_dim) for _ in range(4)
        )
        self.not_a_point_embed = nn.Embedding(1, embed_dim)
        self.no_mask_embed = nn.Embedding(1, embed_dim)
        self.mask_downscaling = nn.Sequential(
            nn.Conv2d(1, mask_in_chans // 4, 2, 2),
            LayerNorm2d(mask_in_chans // 4),
            nn.GELU(),
            nn.Conv2d(mask_in_chans // 4, mask_in_chans, 2, 2),
            LayerNorm2d(mask_in_chans),
            nn.GELU(),
            nn.Conv2d(mask_in_chans, embed_dim, 1),
        )

    def get_dense_pe(self):
        return self.pe_layer(self.image_embedding_size)[None]

    def _embed_points(self, coords, labels):
        emb = self.pe_layer.encode_points(coords, self.input_size)
        emb = emb + torch.where(
            (labels == 1)[..., None],
            self.point_embeddings[1].weight[0],
            self.point_embeddings[0].weight[0],
        )
        return emb

    def _embed_box(self, box):
        emb = self.pe_layer.encode_points(box.reshape(-1, 2, 2), self.input_size)
        emb = emb + torch.stack(
            [self.point_embeddings[2].weight[0], self.point_embeddings[3].weight[0]]
        )
        return emb

    def forward(self, coords=None, labels=None, box=None, mask=None, batch_size=1):
        device = self.no_mask_embed.weight.device
        sparse = torch.empty(batch_size, 0, self.embed_dim, device=device)
        if coords is not None:
            sparse = torch.cat([sparse, self._embed_points(coords, labels)], dim=1)
        if box is not None:
            sparse = torch.cat([sparse, self._embed_box(box)], dim=1)
        if mask is not None:
            dense = self.mask_downscaling(mask)
        else:
            h, w = self.image_embedding_size
            dense = self.no_mask_embed.weight.reshape(1, -1, 1, 1).expand(
                batch_size, -1, h, w
            )
        return sparse, dense


class CrossAttention(nn.Module):
    """Attention with an optional internal downsampling of the head width."""

    def __init__(self, embed_dim, num_heads, downsample_rate=1):
        super().__init__()
        self.internal_dim = embed_dim // downsample_rate
        self.num_heads = num_heads
        if self.internal_dim % num_heads != 0:
            raise ConfigError("internal dim must divide num_heads")
        self.q_proj = nn.Linear(embed_dim, self.internal_dim)
        self.k_proj = nn.Linear(embed_dim, self.internal_dim)
        self.v_proj = nn.Linear(embed_dim, self.internal_dim)
        self.out_proj = nn.Linear(self.internal_dim, embed_dim)

    def _heads(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v):
        q = self._heads(self.q_proj(q))
        k = self._heads(self.k_proj(k))
        v = self._heads(self.v_proj(v))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).flatten(2)
        return self.out_proj(out)


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image and image->token cross attention."""

    def __init__(self, embed_dim, num_heads, mlp_dim, skip_first_layer_pe=False):
        super().__init__()
        self.self_attn = CrossAttention(embed_dim, num_heads)
        self.norm1 = nn.LayerNorm(embed_dim)
        self.cross_attn_token_to_image = CrossAttention(embed_dim, num_heads, 2)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, mlp_dim), nn.ReLU(), nn.Linear(mlp_dim, embed_dim)
        )
        self.norm3 = nn.LayerNorm(embed_dim)
        self.cross_attn_image_to_token = CrossAttention(embed_dim, num_heads, 2)
        self.norm4 = nn.LayerNorm(embed_dim)
        self.skip_first_layer_pe = skip_first_layer_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_layer_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_attn_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_attn_image_to_token(k, q, queries))
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, depth, embed_dim, num_heads, mlp_dim):
        super().__init__()
        self.layers = nn.ModuleList(
            TwoWayBlock(embed_dim, num_heads, mlp_dim, skip_first_layer_pe=(i == 0))
            for i in range(depth)
        )
        self.final_attn_token_to_image = CrossAttention(embed_dim, num_heads, 2)
        self.norm_final_attn = nn.LayerNorm(embed_dim)

    def forward(self, image_embedding, image_pe, tokens):
        b, c, h, w = image_embedding.shape
        keys = image_embedding.flatten(2).permute(0, 2, 1)
        key_pe = image_pe.flatten(2).permute(0, 2, 1)
        queries = tokens
        query_pe = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, query_pe, key_pe)
        q = queries + query_pe
        k = keys + key_pe
        queries = queries + self.final_attn_token_to_image(q, k, keys)
        queries = self.norm_final_attn(queries)
        return queries, keys


class Mlp3(nn.Module):
    def __init__(self, dim_in, dim_hidden, dim_out):
        super().__init__()
        self.layers = nn.ModuleList([
            nn.Linear(dim_in, dim_hidden),
            nn.Linear(dim_hidden, dim_hidden),
            nn.Linear(dim_hidden, dim_out),
        ])

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class MaskDecoder(nn.Module):
    """Single-mask decoder: one learned mask token, two-way transformer,
    4x output upscaling, hypernetwork head."""

    def __init__(self, transformer_dim=256, depth=2, num_heads=8, mlp_dim=2048):
        super().__init__()
        self.transformer_dim = transformer_dim
        self.mask_token = nn.Embedding(1, transformer_dim)
        self.transformer = TwoWayTransformer(depth, transformer_dim, num_heads, mlp_dim)
        self.output_upscaling = nn.Sequential(
            nn.ConvTranspose2d(transformer_dim, transformer_dim // 4, 2, 2),
            LayerNorm2d(transformer_dim // 4),
            nn.GELU(),
            nn.ConvTranspose2d(transformer_dim // 4, transformer_dim // 8, 2, 2),
            nn.GELU(),
        )
        self.hyper_mlp = Mlp3(transformer_dim, transformer_dim, transformer_dim // 8)

    def forward(self, image_embeddings, image_pe, sparse_embeddings, dense_embeddings):
        b = image_embeddings.shape[0]
        tokens = torch.cat(
            [self.mask_token.weight[None].expand(b, -1, -1), sparse_embeddings], dim=1
        )
        src = image_embeddings + dense_embeddings
        hs, src = self.transformer(src, image_pe, tokens)
        mask_tok = hs[:, 0]
        h, w = image_embeddings.shape[-2:]
        src = src.permute(0, 2, 1).reshape(b, -1, h, w)
        upscaled = self.output_upscaling(src)
        weights = self.hyper_mlp(mask_tok)
        masks = torch.einsum("bc,bchw->bhw", weights, upscaled)[:, None]
        return masks  # (B, 1, 4h, 4w) logits


class ShadowSegmenter(nn.Module):
    """Coarse mask -> prompts -> frozen prompt encoder -> mask decoder."""

    def __init__(self, image_encoder, prompt_encoder, mask_decoder,
                 prompt_generator, sampling_cfg=None, prompt_mode=0,
                 mask_size=None):
        super().__init__()
        self.image_encoder = image_encoder
        self.prompt_encoder = prompt_encoder
        self.mask_decoder = mask_decoder
        self.prompt_generator = prompt_generator
        self.sampling_cfg = sampling_cfg or SamplingConfig()
        self.prompt_mode = prompt_mode  # 0 points, 1 box, 2 dense mask, None: no prompt
        self.mask_size = mask_size or prompt_generator.mask_size
        self.input_size = image_encoder.spec.img_size

    def build_prompts(self, coarse):
        """Sample prompts from a detached coarse mask, one set per image."""
        coarse_np = coarse.detach().cpu().numpy()
        if self.prompt_mode is None:
            return [None] * coarse_np.shape[0]
        return [
            assemble_prompts(cm, self.sampling_cfg, self.prompt_mode, self.input_size)
            for cm in coarse_np
        ]

    def _encode_prompts(self, prompt_sets, device, batch_size):
        if self.prompt_mode is None:
            return self.prompt_encoder(batch_size=batch_size)
        if self.prompt_mode == 0:
            coords = torch.as_tensor(
                np.stack([ps.point_coords for ps in prompt_sets]),
                dtype=torch.float32, device=device)
            labels = torch.as_tensor(
                np.stack([ps.point_labels for ps in prompt_sets]), device=device)
            return self.prompt_encoder(coords=coords, labels=labels,
                                       batch_size=batch_size)
        if self.prompt_mode == 1:
            # Images without any above-threshold pixel get a full-frame box.
            full = (0.0, 0.0, float(self.input_size), float(self.input_size))
            boxes = torch.as_tensor(
                [list(ps.bbox) if ps.bbox is not None else list(full)
                 for ps in prompt_sets],
                dtype=torch.float32, device=device)
            return self.prompt_encoder(box=boxes, batch_size=batch_size)
        dense = torch.as_tensor(
            np.stack([ps.dense_mask for ps in prompt_sets])[:, None],
            dtype=torch.float32, device=device)
        # The mask downscaling path divides by 4, so the dense prompt must be
        # 4x the embedding grid regardless of the encoder patch size.
        side = 4 * self.image_encoder.embedding_side
        if dense.shape[-1] != side:
            dense = F.interpolate(dense, size=(side, side), mode="bilinear",
                                  align_corners=False)
        return self.prompt_encoder(mask=dense, batch_size=batch_size)

    def forward(self, images):
        coarse = self.prompt_generator(images)
        prompt_sets = self.build_prompts(coarse)
        emb = self.image_encoder(images)
        sparse, dense = self._encode_prompts(prompt_sets, images.device, images.shape[0])
        logits = self.mask_decoder(emb, self.prompt_encoder.get_dense_pe(),
                                   sparse, dense)
        final = torch.sigmoid(F.interpolate(
            logits, size=(self.mask_size, self.mask_size), mode="bilinear",
            align_corners=False))[:, 0]
        return coarse, final, prompt_sets


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "toy"  # "toy" or "full"
    input_size: int = 64
    mask_size: int = 64
    backbone: str = "tiny"
    top_channels: int = 32
    adapter_ratio: float = 0.25
    adapter_scale: float = 1.0
    adapter_mha: bool = True
    adapter_ffn: bool = True
    prompt_mode: int | None = 0
    seed: int = 0


def toy_model_config(**overrides):
    return ModelConfig(**overrides)


def full_model_config(**overrides):
    defaults = dict(preset="full", input_size=1024, mask_size=256,
                    backbone="efficientnet_b1", top_channels=128)
    defaults.update(overrides)
    return ModelConfig(**defaults)


def build_model(cfg: ModelConfig, sampling_cfg=None, backbone_weights=None,
                encoder_weights=None):
    """Construct the full pipeline. Init is deterministic given cfg.seed."""
    torch.manual_seed(cfg.seed)
    common = dict(adapter_ratio=cfg.adapter_ratio, adapter_scale=cfg.adapter_scale,
                  use_adapter_mha=cfg.adapter_mha, use_adapter_ffn=cfg.adapter_ffn)
    if cfg.preset == "toy":
        spec = toy_encoder_spec(img_size=cfg.input_size, **common)
        decoder = MaskDecoder(transformer_dim=spec.out_channels, depth=2,
                              num_heads=4, mlp_dim=256)
    elif cfg.preset == "full":
        spec = vit_b_spec(img_size=cfg.input_size, **common)
        decoder = MaskDecoder(transformer_dim=spec.out_channels)
    else:
        raise ConfigError(f"unknown model preset {cfg.preset!r}")
    encoder = AdaptedImageEncoder(spec)
    if encoder_weights is not None:
        encoder.load_base_state(torch.load(encoder_weights, map_location="cpu"))
    side = encoder.embedding_side
    prompt_encoder = PromptEncoder(spec.out_channels, (side, side), cfg.input_size)
    backbone = build_backbone(cfg.backbone, weights_path=backbone_weights)
    generator = CoarseMaskPredictor(
        backbone, DecoderConfig(top_channels=cfg.top_channels),
        input_size=cfg.input_size, mask_size=cfg.mask_size)
    return ShadowSegmenter(encoder, prompt_encoder, decoder, generator,
                           sampling_cfg=sampling_cfg, prompt_mode=cfg.prompt_mode,
                           mask_size=cfg.mask_size)
