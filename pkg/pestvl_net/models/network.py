"""
PestVL-Net assembly: conv stem, GAV-RWKV stages, VLF blocks and the tail.
"""

import logging
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..schemas.config import ModelConfig
from ..utils.exceptions import ShapeMismatchError, ValidationError
from .fusion import VLFBlock
from .partition import PartitionState
from .rwkv import GAVRWKVBlock
from .spectral import saliency_map

logger = logging.getLogger(__name__)


class ConvStem(nn.Module):
    """Two 3x3 convolutions with GroupNorm and GELU; total stride 2 or 4."""

    def __init__(self, in_channels: int, channels: int, stride: int = 4):
        super().__init__()
        mid = max(1, channels // 2)
        self.conv1 = nn.Conv2d(in_channels, mid, 3, stride=2, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(1, mid)
        self.conv2 = nn.Conv2d(mid, channels, 3, stride=stride // 2, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(1, channels)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.norm1(self.conv1(image)))
        return F.gelu(self.norm2(self.conv2(x)))


class ConvBlock(nn.Module):
    """Residual conv block replacing a GAV-RWKV stage in the conv-only ablation."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.last_state: Optional[PartitionState] = None

    def forward(
        self,
        x: torch.Tensor,
        saliency: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        grid = x.permute(0, 3, 1, 2)
        out = self.proj(F.gelu(self.conv(self.norm(grid))))
        return x + out.permute(0, 2, 3, 1)


class PestVLNet(nn.Module):
    """
    Image classifier with saliency-guided RWKV stages and caption fusion.

    ``forward(images, text)`` takes ``(B, in_channels, H, W)`` images and
    ``(B, D)`` caption embeddings and returns ``(B, class_count)`` logits.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        channels = config.stem_channels
        ablation = config.ablation

        self.stem = ConvStem(config.in_channels, channels, config.stem_stride)
        if ablation.conv_only_backbone:
            self.blocks = nn.ModuleList(ConvBlock(channels) for _ in range(config.stage_count))
        else:
            self.blocks = nn.ModuleList(
                GAVRWKVBlock(channels, config.rwkv, config.partition, ablation.disable_partition)
                for _ in range(config.stage_count)
            )
        fusion_count = 0 if ablation.disable_fusion else config.fusion_count
        self.fusion = nn.ModuleList(
            VLFBlock(
                channels,
                config.embedding_dim,
                prompt_tokens=config.prompt_tokens,
                attention_dim=config.attention_dim,
                ffn_ratio=config.fusion.ffn_ratio,
            )
            for _ in range(fusion_count)
        )
        self.head_norm = nn.LayerNorm(channels)
        self.head = nn.Linear(channels, config.class_count)

    @property
    def uses_text(self) -> bool:
        return len(self.fusion) > 0

    def stage_saliency(self, images: torch.Tensor) -> torch.Tensor:
        """Normalized saliency average-pooled to the stage resolution ``(B, h, w)``."""
        side = self.config.feature_size
        with torch.no_grad():
            sal = saliency_map(
                images,
                epsilon=self.config.saliency.epsilon,
                kernel_size=self.config.saliency.kernel_size,
                smooth_sigma=self.config.saliency.smooth_sigma,
                exponentiate=self.config.saliency.exponentiate,
            ).data
            pooled = F.adaptive_avg_pool2d(sal.unsqueeze(1), (side, side)).squeeze(1)
        return pooled.to(images.dtype)

    def _check_inputs(self, images: torch.Tensor, text: Optional[torch.Tensor]) -> None:
        expected = (self.config.in_channels, self.config.image_size, self.config.image_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeMismatchError("forward", f"(B, {expected})", tuple(images.shape))
        if self.uses_text:
            if text is None:
                raise ValidationError("Caption embeddings are required when fusion is enabled")
            if text.shape != (images.shape[0], self.config.embedding_dim):
                raise ShapeMismatchError(
                    "forward text", (images.shape[0], self.config.embedding_dim), tuple(text.shape)
                )

    def stage_features(
        self,
        images: torch.Tensor,
        text: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ) -> List[torch.Tensor]:
        """
        Channel-last features after every stage.

        Index 0 is the stem output, 1..N follow the backbone blocks and the
        remaining entries follow the fusion blocks.
        """
        self._check_inputs(images, text)
        saliency = None
        if not (self.config.ablation.conv_only_backbone or self.config.ablation.disable_partition):
            saliency = self.stage_saliency(images)

        feature = self.stem(images).permute(0, 2, 3, 1)
        features = [feature]
        for block in self.blocks:
            feature = block(feature, saliency, generator)
            features.append(feature)

        batch, height, width, channels = feature.shape
        tokens = feature.reshape(batch, height * width, channels)
        for fusion in self.fusion:
            tokens = fusion(tokens, text)
            features.append(tokens.reshape(batch, height, width, channels))
        return features

    def forward(
        self,
        images: torch.Tensor,
        text: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        final = self.stage_features(images, text, generator)[-1]
        pooled = final.mean(dim=(1, 2))
        return self.head(self.head_norm(pooled))

    def partition_states(self) -> List[Optional[PartitionState]]:
        """Partition state of every backbone block from the latest forward pass."""
        return [block.last_state for block in self.blocks]

    @property
    def stage_count(self) -> int:
        return 1 + len(self.blocks) + len(self.fusion)
