"""
Pydantic schemas for model, training and data configuration.
"""

import json
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Section(BaseModel):
    """Base for config sections: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SaliencyConfig(_Section):
    """Spectral residual saliency parameters."""

    epsilon: float = Field(1e-6, gt=0, description="Offset inside ln(A + eps)")
    kernel_size: int = Field(3, ge=1, description="Mean-filter kernel side n (odd)")
    exponentiate: bool = Field(
        False, description="Reconstruct with exp(R) instead of R as amplitude"
    )
    smooth_sigma: float = Field(0.0, ge=0, description="Gaussian smoothing sigma, 0 = off")

    @field_validator("kernel_size")
    @classmethod
    def validate_kernel_size(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return v


class PartitionConfig(_Section):
    """Saliency-guided window partitioning parameters."""

    tau: float = Field(1.0, gt=0, description="Gumbel-Softmax temperature")
    hard: bool = Field(True, description="Straight-through one-hot window mask")
    refine_windows: int = Field(1, ge=1, le=4, description="K in TopK window selection")
    gumbel_noise: bool = Field(True, description="Add Gumbel noise while training")


class RwkvConfig(_Section):
    """GAV-RWKV block parameters."""

    shift_kernel: int = Field(3, ge=1, description="Depthwise shift kernel side")
    hidden_ratio: float = Field(1.0, gt=0, description="Channel-mix hidden width / C")
    learn_decay: bool = Field(True, description="Train decay w and bonus u")
    decay_init: Tuple[float, float] = Field(
        (0.0, 4.0), description="Linear spacing range of the initial per-channel decay"
    )
    bonus_init: float = Field(0.5, description="Initial per-channel bonus u")
    dense_max_len: int = Field(
        256, ge=1, description="Segments longer than this use the linear-time scan"
    )

    @field_validator("shift_kernel")
    @classmethod
    def validate_shift_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("shift_kernel must be odd")
        return v


class FusionConfig(_Section):
    """Vision-language fusion parameters."""

    prompt_tokens: int = Field(4, ge=0, description="Learnable prompt tokens P")
    attention_dim: Optional[int] = Field(
        None, ge=1, description="Shared attention dimension d_k (default: stem channels)"
    )
    ffn_ratio: int = Field(4, ge=1, description="FFN hidden width / C")


class OptimizerConfig(_Section):
    """SGD training parameters."""

    lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    schedule: Literal["constant", "cosine"] = "constant"
    max_grad_norm: Optional[float] = Field(None, gt=0)
    threads: int = Field(1, ge=1, description="torch intra-op threads")


class DataConfig(_Section):
    """Dataset ingestion parameters."""

    split_ratio: Tuple[int, int, int] = (7, 1, 2)
    hflip: bool = False
    num_workers: int = Field(0, ge=0)
    caption_mode: Literal["per_image", "per_class"] = "per_image"


class AblationConfig(_Section):
    """Component switches mirroring the ablation configurations."""

    conv_only_backbone: bool = False
    disable_partition: bool = False
    disable_fusion: bool = False
    disable_prompt: bool = False


class EvaluationConfig(_Section):
    """Metric options."""

    average: Literal["macro", "weighted"] = "macro"


class ModelConfig(_Section):
    """Complete configuration of a PestVL-Net model and its training run."""

    image_size: int = Field(224, ge=1)
    in_channels: int = Field(3, ge=1)
    stem_channels: int = Field(64, ge=1)
    stem_stride: Literal[2, 4] = 4
    stage_count: int = Field(5, ge=1, description="N GAV-RWKV blocks")
    fusion_count: int = Field(2, ge=0, description="M VLF blocks")
    class_count: int = Field(10, ge=1)
    embedding_dim: int = Field(512, ge=1, description="Text embedding dimension D")

    saliency: SaliencyConfig = Field(default_factory=SaliencyConfig)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    rwkv: RwkvConfig = Field(default_factory=RwkvConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def validate_geometry(self) -> "ModelConfig":
        if self.image_size % (4 * self.stem_stride) != 0:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by "
                f"4 * stem_stride = {4 * self.stem_stride}"
            )
        return self

    @property
    def feature_size(self) -> int:
        """Side of the stage feature maps."""
        return self.image_size // self.stem_stride

    @property
    def attention_dim(self) -> int:
        return self.fusion.attention_dim or self.stem_channels

    @property
    def prompt_tokens(self) -> int:
        return 0 if self.ablation.disable_prompt else self.fusion.prompt_tokens

    def canonical_json(self) -> str:
        """Sorted-key compact JSON; identical configs give identical bytes."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
