"""
Image outputs: saliency maps, partition overlays and stage feature maps.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from ..models.network import PestVLNet
from ..models.partition import SaliencyPartitioner, energy_map
from ..models.spectral import min_max_normalize, saliency_map
from ..schemas.config import ModelConfig
from ..utils.exceptions import ValidationError
from .checkpoint_service import tensors_to_bytes

logger = logging.getLogger(__name__)

HEAT_COLORMAP = "jet"
COARSE_COLOR = (255, 255, 255)
REFINED_COLOR = (255, 64, 64)


def to_uint8(plane: torch.Tensor) -> np.ndarray:
    """[0, 1] plane to 8-bit values."""
    array = plane.detach().cpu().to(torch.float64).clamp(0, 1).numpy()
    return (array * 255.0).round().astype(np.uint8)


def save_gray_png(plane: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(plane)).save(path)
    return path


def colorize(plane: torch.Tensor, colormap: str = HEAT_COLORMAP) -> np.ndarray:
    """Map a [0, 1] plane to RGB uint8 with a matplotlib colormap."""
    values = plane.detach().cpu().to(torch.float64).clamp(0, 1).numpy()
    rgba = matplotlib.colormaps[colormap](values)
    return (rgba[..., :3] * 255.0).round().astype(np.uint8)


def compute_saliency(image: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """Normalized saliency of a ``(3, H, W)`` image at full resolution."""
    sal = config.saliency
    return saliency_map(
        image,
        epsilon=sal.epsilon,
        kernel_size=sal.kernel_size,
        smooth_sigma=sal.smooth_sigma,
        exponentiate=sal.exponentiate,
    ).data


def write_saliency(
    image: torch.Tensor, config: ModelConfig, out_path: str | Path, raw_path: Optional[str | Path] = None
) -> torch.Tensor:
    """Write the saliency map as 8-bit grayscale, optionally with a raw float dump."""
    saliency = compute_saliency(image, config)
    save_gray_png(saliency, out_path)
    if raw_path is not None:
        Path(raw_path).parent.mkdir(parents=True, exist_ok=True)
        Path(raw_path).write_bytes(tensors_to_bytes({"saliency": saliency}))
    return saliency


@dataclass
class PartitionView:
    energies: List[float]
    selected: List[int]
    feature_size: int


def partition_view(image: torch.Tensor, config: ModelConfig) -> PartitionView:
    """Window energies and the eval-mode selection for one image."""
    side = config.feature_size
    saliency = compute_saliency(image, config)
    pooled = F.adaptive_avg_pool2d(saliency[None, None], (side, side))[:, 0].to(torch.float32)
    partitioner = SaliencyPartitioner(
        tau=config.partition.tau,
        hard=True,
        refine_windows=config.partition.refine_windows,
        gumbel_noise=False,
    )
    state = partitioner.state(pooled, side * side, training=False)
    return PartitionView(
        energies=energy_map(pooled[0], 2).tolist(),
        selected=state.selected_index[0].tolist(),
        feature_size=side,
    )


def draw_partition_overlay(image: torch.Tensor, view: PartitionView, out_path: str | Path) -> Path:
    """Coarse 2x2 grid over the image with refined windows split into 2x2 fine windows."""
    rgb = np.transpose(to_uint8(image), (1, 2, 0))
    canvas = Image.fromarray(np.ascontiguousarray(rgb))
    draw = ImageDraw.Draw(canvas)
    width, height = canvas.size
    half_w, half_h = width // 2, height // 2
    for q in range(4):
        left, top = (q % 2) * half_w, (q // 2) * half_h
        box = (left, top, left + half_w - 1, top + half_h - 1)
        if q in view.selected:
            draw.rectangle(box, outline=REFINED_COLOR)
            draw.line((left + half_w // 2, top, left + half_w // 2, top + half_h - 1), fill=REFINED_COLOR)
            draw.line((left, top + half_h // 2, left + half_w - 1, top + half_h // 2), fill=REFINED_COLOR)
        else:
            draw.rectangle(box, outline=COARSE_COLOR)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)
    return out_path


def feature_map(feature: torch.Tensor) -> torch.Tensor:
    """Channel mean of a ``(H, W, C)`` feature, min-max scaled to [0, 1]."""
    return min_max_normalize(feature.detach().to(torch.float64).mean(dim=-1))


@torch.no_grad()
def export_feature_maps(
    model: PestVLNet,
    image: torch.Tensor,
    stage_indices: Sequence[int],
    out_dir: str | Path,
    text: Optional[torch.Tensor] = None,
) -> List[Path]:
    """
    Write heat-coloured channel-mean maps for the requested stages.

    Stage 0 is the stem output; 1..N follow the backbone blocks and the rest
    follow the fusion blocks.

    Raises:
        ValidationError: A stage index is out of range
    """
    for index in stage_indices:
        if not 0 <= index < model.stage_count:
            raise ValidationError(f"Stage index {index} out of range [0, {model.stage_count})")
    if model.uses_text and text is None:
        text = torch.zeros(model.config.embedding_dim)
    model.eval()
    features = model.stage_features(image[None], None if text is None else text[None])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for index in stage_indices:
        path = out / f"stage_{index:02d}.png"
        Image.fromarray(colorize(feature_map(features[index][0]))).save(path)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} feature maps to {out}")
    return paths
