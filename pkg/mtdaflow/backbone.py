"""
Feature extractor F: image batch [B x C x H x W] -> features [B x d_f].
Two kinds behind one interface: a small conv net (default) and a conv-stem + self-attention hybrid.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Sequence

import torch
import torch.nn as nn

from .config import BackboneSpec

logger = logging.getLogger(__name__)


class ShapeContractError(Exception):
    """Input tensor does not satisfy the declared shape contract."""


class BackboneLoadError(Exception):
    """Pretrained weights were requested but could not be loaded."""


class Extractor(nn.Module):
    """Base: records the expected input geometry so extract() can enforce it."""

    def __init__(self, in_channels: int, image_size: int, d_f: int) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        self.d_f = d_f


class SmallConvExtractor(Extractor):
    """3 x (conv3x3-BN-ReLU-maxpool) -> global average pool -> linear + BN bottleneck."""

    def __init__(
        self, in_channels: int = 3, image_size: int = 32, d_f: int = 256, channels: Sequence[int] = (32, 64, 128)
    ) -> None:
        super().__init__(in_channels, image_size, d_f)
        layers: List[nn.Module] = []
        prev = in_channels
        for ch in channels:
            layers += [
                nn.Conv2d(prev, ch, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.bottleneck = nn.Sequential(nn.Linear(prev, d_f), nn.BatchNorm1d(d_f))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.pool(self.features(x)).flatten(1)
        return self.bottleneck(h)


class Attention(nn.Module):
    """Multi-head self-attention; keeps the last attention map for inspection."""

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        assert dim % num_heads == 0, "dim must be divisible by num_heads"
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.last_attn: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(out)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 2) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class HybridExtractor(Extractor):
    """
    Conv stem (two stride-2 conv-BN-ReLU) -> 1x1 patch embedding of the stem feature map ->
    learned position embedding -> encoder blocks -> token mean -> linear + BN bottleneck to d_f.
    """

    def __init__(
        self,
        in_channels: int = 3,
        image_size: int = 32,
        d_f: int = 256,
        stem_channels: int = 64,
        embed_dim: int = 128,
        depth: int = 2,
        num_heads: int = 4,
        mlp_ratio: int = 2,
    ) -> None:
        super().__init__(in_channels, image_size, d_f)
        half = stem_channels // 2
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, half, kernel_size=3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(half),
            nn.ReLU(inplace=True),
            nn.Conv2d(half, stem_channels, kernel_size=3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(stem_channels),
            nn.ReLU(inplace=True),
        )
        grid = (image_size + 3) // 4
        self.num_tokens = grid * grid
        self.patch_embed = nn.Conv2d(stem_channels, embed_dim, kernel_size=1)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_tokens, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            [EncoderBlock(embed_dim, num_heads, mlp_ratio) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(embed_dim)
        self.bottleneck = nn.Sequential(nn.Linear(embed_dim, d_f), nn.BatchNorm1d(d_f))

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        fmap = self.patch_embed(self.stem(x))
        return fmap.flatten(2).transpose(1, 2) + self.pos_embed

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.tokens(x)
        for blk in self.blocks:
            h = blk(h)
        return self.bottleneck(self.norm(h).mean(dim=1))

    def attention_maps(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Per-block attention [B x heads x T x T] for batch x."""
        self.forward(x)
        return [blk.attn.last_attn for blk in self.blocks]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _load_weights(module: nn.Module, path: str) -> None:
    if not Path(path).is_file():
        raise BackboneLoadError(f"pretrained weights not found: {path}")
    try:
        state = torch.load(path, map_location="cpu")
    except Exception as e:
        raise BackboneLoadError(f"cannot read pretrained weights {path}: {e}") from e
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    result = module.load_state_dict(state, strict=False)
    logger.info("loaded %s: missing=%d unexpected=%d", path, len(result.missing_keys), len(result.unexpected_keys))


def build_hybrid_stub(spec: BackboneSpec, in_channels: int = 3, image_size: int = 32) -> HybridExtractor:
    """Hybrid conv/attention extractor. Loading `spec.pretrained_weights` is optional."""
    if spec.kind != "hybrid_conv_attention":
        raise ValueError(f"build_hybrid_stub needs kind=hybrid_conv_attention, got {spec.kind!r}")
    model = HybridExtractor(
        in_channels=in_channels,
        image_size=image_size,
        d_f=spec.d_f,
        stem_channels=spec.stem_channels,
        embed_dim=spec.embed_dim,
        depth=spec.depth,
        num_heads=spec.num_heads,
    )
    if spec.pretrained_weights:
        _load_weights(model, spec.pretrained_weights)
    return model


def build_extractor(spec: BackboneSpec, in_channels: int = 3, image_size: int = 32) -> Extractor:
    if spec.kind == "hybrid_conv_attention":
        return build_hybrid_stub(spec, in_channels, image_size)
    if spec.kind != "small_conv":
        raise ValueError(f"unknown backbone kind {spec.kind!r}")
    model = SmallConvExtractor(in_channels, image_size, spec.d_f, tuple(spec.conv_channels))
    if spec.pretrained_weights:
        _load_weights(model, spec.pretrained_weights)
    return model


def extract(extractor: Extractor, batch: torch.Tensor) -> torch.Tensor:
    """F(x). Checks the batch against the extractor's input geometry."""
    expected = (extractor.in_channels, extractor.image_size, extractor.image_size)
    if batch.dim() != 4 or batch.shape[0] == 0 or tuple(batch.shape[1:]) != expected:
        raise ShapeContractError(
            f"expected non-empty batch of shape B x {expected[0]} x {expected[1]} x {expected[2]}, "
            f"got {tuple(batch.shape)}"
        )
    return extractor(batch)
