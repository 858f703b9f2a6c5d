"""
Vision-language fusion.

Visual tokens are ``(B, T, C)``; text tokens are ``(B, S, D)`` with S = 1 + P
(one pooled caption embedding followed by the shared learnable prompt).
"""

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..utils.exceptions import ShapeMismatchError
from .rwkv import LN_EPS, layer_norm


def refine(
    x: torch.Tensor,
    weight: torch.Tensor,
    ln_scale: Optional[torch.Tensor] = None,
    ln_offset: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Linear(LN(x)) + x with a bias-free square projection."""
    dim = x.shape[-1]
    if weight.shape != (dim, dim):
        raise ShapeMismatchError("refine", (dim, dim), tuple(weight.shape))
    return F.linear(layer_norm(x, ln_scale, ln_offset), weight) + x


def refine_visual(
    visual: torch.Tensor,
    weight: torch.Tensor,
    ln_scale: Optional[torch.Tensor] = None,
    ln_offset: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    return refine(visual, weight, ln_scale, ln_offset)


def refine_text(
    text: torch.Tensor,
    weight: torch.Tensor,
    ln_scale: Optional[torch.Tensor] = None,
    ln_offset: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    return refine(text, weight, ln_scale, ln_offset)


def concat_prompt(text: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
    """
    [F_t, F_p] along the token axis.

    ``text`` is ``(B, D)`` (one pooled token) or ``(B, S, D)``; ``prompt`` is
    ``(P, D)`` and is shared across the batch.
    """
    if text.dim() == 2:
        text = text.unsqueeze(1)
    if prompt.dim() != 2 or prompt.shape[-1] != text.shape[-1]:
        raise ShapeMismatchError("concat_prompt", f"(P, {text.shape[-1]})", tuple(prompt.shape))
    if prompt.shape[0] == 0:
        return text
    return torch.cat([text, prompt.unsqueeze(0).expand(text.shape[0], -1, -1)], dim=1)


def cross_attention(
    visual: torch.Tensor,
    text: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    return_weights: bool = False,
) -> torch.Tensor | Tuple[torch.Tensor, torch.Tensor]:
    """softmax(Q_v K_t^T / sqrt(d_k)) V_t, single head, queries from the visual side."""
    if w_q.shape[1] != visual.shape[-1] or w_k.shape[1] != text.shape[-1]:
        raise ShapeMismatchError(
            "cross_attention", (visual.shape[-1], text.shape[-1]), (w_q.shape[1], w_k.shape[1])
        )
    if w_q.shape[0] != w_k.shape[0] or w_v.shape[1] != text.shape[-1]:
        raise ShapeMismatchError("cross_attention", tuple(w_q.shape), (tuple(w_k.shape), tuple(w_v.shape)))
    query = F.linear(visual, w_q)
    key = F.linear(text, w_k)
    value = F.linear(text, w_v)
    logits = query @ key.transpose(-1, -2) / math.sqrt(w_q.shape[0])
    weights = torch.softmax(logits, dim=-1)
    out = weights @ value
    return (out, weights) if return_weights else out


class VLFBlock(nn.Module):
    """Refine both modalities, cross-attend, then a residual FFN."""

    def __init__(
        self,
        channels: int,
        embedding_dim: int,
        prompt_tokens: int = 4,
        attention_dim: Optional[int] = None,
        ffn_ratio: int = 4,
    ):
        super().__init__()
        attention_dim = attention_dim or channels
        self.visual_norm = nn.LayerNorm(channels, eps=LN_EPS)
        self.visual_proj = nn.Linear(channels, channels, bias=False)
        self.text_norm = nn.LayerNorm(embedding_dim, eps=LN_EPS)
        self.text_proj = nn.Linear(embedding_dim, embedding_dim, bias=False)
        self.prompt = nn.Parameter(torch.randn(prompt_tokens, embedding_dim) * 0.02)
        self.query = nn.Linear(channels, attention_dim, bias=False)
        self.key = nn.Linear(embedding_dim, attention_dim, bias=False)
        self.value = nn.Linear(embedding_dim, channels, bias=False)
        self.ffn_norm = nn.LayerNorm(channels, eps=LN_EPS)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_ratio * channels),
            nn.GELU(),
            nn.Linear(ffn_ratio * channels, channels),
        )

    def forward(self, visual: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        if visual.dim() != 3:
            raise ShapeMismatchError("vlf_block", "(B, T, C)", tuple(visual.shape))
        if text.shape[0] != visual.shape[0]:
            raise ShapeMismatchError("vlf_block text batch", visual.shape[0], text.shape[0])
        refined = refine_visual(
            visual, self.visual_proj.weight, self.visual_norm.weight, self.visual_norm.bias
        )
        text_tokens = refine_text(
            concat_prompt(text, self.prompt),
            self.text_proj.weight,
            self.text_norm.weight,
            self.text_norm.bias,
        )
        fused = refined + cross_attention(
            refined, text_tokens, self.query.weight, self.key.weight, self.value.weight
        )
        return self.ffn(self.ffn_norm(fused)) + fused
