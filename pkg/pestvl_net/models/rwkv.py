"""
Granularity-aware Vision-RWKV block.

Features inside a block are channel-last ``(B, H, W, C)``; sequences are
``(B, T, C)``. Projection weights follow the ``nn.Linear`` convention
``(out_features, in_features)``, so ``project(X, W) = X @ W.T``.
"""

import logging
import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..schemas.config import PartitionConfig, RwkvConfig
from ..utils.exceptions import ShapeMismatchError
from .partition import (
    PartitionState,
    SaliencyPartitioner,
    Segment,
    TokenSequence,
    WindowLayout,
    flatten_windows,
    inverse_window_transform,
    validate_segments,
)

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
_NEG_INIT = -1e30


def layer_norm(
    x: torch.Tensor,
    scale: Optional[torch.Tensor] = None,
    offset: Optional[torch.Tensor] = None,
    eps: float = LN_EPS,
) -> torch.Tensor:
    """Standardize over the last (channel) axis with population variance, then affine."""
    return F.layer_norm(x, (x.shape[-1],), scale, offset, eps)


def _spatial_side(seq_len: int) -> Tuple[int, int]:
    side = math.isqrt(seq_len)
    if side * side != seq_len:
        raise ShapeMismatchError("token_shift", "square token count", seq_len)
    return side, side


def token_shift(
    x: torch.Tensor,
    alpha: torch.Tensor,
    beta: torch.Tensor,
    kernel: torch.Tensor,
    ln_scale: Optional[torch.Tensor] = None,
    ln_offset: Optional[torch.Tensor] = None,
    hw: Optional[Tuple[int, int]] = None,
) -> torch.Tensor:
    """
    X_S = alpha * DConv(LN(X)) + beta * LN(X).

    ``x`` is ``(B, H, W, C)`` or a row-major ``(B, T, C)`` sequence; the latter
    is reshaped to ``hw`` or, if not given, to a square grid. ``kernel`` is a
    depthwise ``(C, 1, k, k)`` weight applied with zero padding.
    """
    normed = layer_norm(x, ln_scale, ln_offset)
    if x.dim() == 3:
        height, width = hw if hw is not None else _spatial_side(x.shape[1])
        if height * width != x.shape[1]:
            raise ShapeMismatchError("token_shift", height * width, x.shape[1])
        grid = normed.reshape(x.shape[0], height, width, x.shape[2])
    elif x.dim() == 4:
        grid = normed
    else:
        raise ShapeMismatchError("token_shift", "(B, H, W, C) or (B, T, C)", tuple(x.shape))

    channels = x.shape[-1]
    if kernel.shape[0] != channels or kernel.shape[-1] % 2 == 0:
        raise ShapeMismatchError("token_shift", f"({channels}, 1, k, k), k odd", tuple(kernel.shape))
    conv = F.conv2d(
        grid.permute(0, 3, 1, 2), kernel, padding=kernel.shape[-1] // 2, groups=channels
    ).permute(0, 2, 3, 1)
    return (alpha * conv + beta * grid).reshape(x.shape)


def project_rkv(
    x: torch.Tensor, w_r: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Three bias-free projections of the shifted tokens."""
    for name, weight in (("W_R", w_r), ("W_K", w_k), ("W_V", w_v)):
        if weight.dim() != 2 or weight.shape[1] != x.shape[-1]:
            raise ShapeMismatchError(f"project_rkv {name}", f"(*, {x.shape[-1]})", tuple(weight.shape))
    return F.linear(x, w_r), F.linear(x, w_k), F.linear(x, w_v)


def squared_relu(x: torch.Tensor) -> torch.Tensor:
    return torch.square(torch.relu(x))


def _dense_segments(
    k: torch.Tensor, v: torch.Tensor, w: torch.Tensor, u: torch.Tensor
) -> torch.Tensor:
    """Direct Ga-WKV over ``(N, L, C)`` segments of equal length L."""
    length = k.shape[1]
    positions = torch.arange(length, device=k.device, dtype=k.dtype)
    distance = (positions[:, None] - positions[None, :]).abs()
    # bias[t, i, c] = -(|t - i| - 1) / L * w_c off the diagonal, u_c on it
    bias = -(distance - 1).unsqueeze(-1) / length * w
    eye = torch.eye(length, dtype=torch.bool, device=k.device).unsqueeze(-1)
    bias = torch.where(eye, u.expand_as(bias), bias)
    logits = bias.unsqueeze(0) + k.unsqueeze(1)
    weights = torch.softmax(logits, dim=2)
    return torch.einsum("ntic,nic->ntc", weights, v)


def _scan_direction(
    k: torch.Tensor, v: torch.Tensor, decay: torch.Tensor
) -> Tuple[List[torch.Tensor], List[torch.Tensor], List[torch.Tensor]]:
    """States (a, b, p) before each step of a one-directional decayed sum."""
    n, length, channels = k.shape
    aa = torch.zeros(n, channels, dtype=k.dtype, device=k.device)
    bb = torch.zeros_like(aa)
    pp = torch.full_like(aa, _NEG_INIT)
    states_a, states_b, states_p = [], [], []
    for t in range(length):
        states_a.append(aa)
        states_b.append(bb)
        states_p.append(pp)
        kt, vt = k[:, t], v[:, t]
        ww = pp - decay
        p = torch.maximum(ww, kt)
        e1 = torch.exp(ww - p)
        e2 = torch.exp(kt - p)
        aa = e1 * aa + e2 * vt
        bb = e1 * bb + e2
        pp = p
    return states_a, states_b, states_p


def _scan_segments(
    k: torch.Tensor, v: torch.Tensor, w: torch.Tensor, u: torch.Tensor
) -> torch.Tensor:
    """Linear-time bidirectional Ga-WKV over ``(N, L, C)`` segments."""
    length = k.shape[1]
    decay = w / length
    fa, fb, fp = _scan_direction(k, v, decay)
    ba, bb, bp = _scan_direction(k.flip(1), v.flip(1), decay)
    fa, fb, fp = (torch.stack(s, dim=1) for s in (fa, fb, fp))
    ba, bb, bp = (torch.stack(s, dim=1).flip(1) for s in (ba, bb, bp))

    bonus = u + k
    p = torch.maximum(torch.maximum(fp, bp), bonus)
    ef, eb, eu = torch.exp(fp - p), torch.exp(bp - p), torch.exp(bonus - p)
    num = ef * fa + eb * ba + eu * v
    den = ef * fb + eb * bb + eu
    return num / den


def _normalize_segments(
    segments: Sequence[Segment] | Sequence[Sequence[Segment]], batch: int, seq_len: int
) -> List[List[Segment]]:
    if len(segments) > 0 and isinstance(segments[0][0], int):
        shared = [tuple(s) for s in segments]  # type: ignore[misc]
        per_sample = [list(shared) for _ in range(batch)]
    else:
        per_sample = [list(s) for s in segments]  # type: ignore[arg-type]
    if len(per_sample) != batch:
        raise ShapeMismatchError("ga_wkv segments", batch, len(per_sample))
    for row in per_sample:
        validate_segments(row, seq_len)
    return per_sample  # type: ignore[return-value]


def ga_wkv(
    k: torch.Tensor,
    v: torch.Tensor,
    w: torch.Tensor,
    u: torch.Tensor,
    segments: Sequence[Segment] | Sequence[Sequence[Segment]],
    dense_max_len: int = 256,
) -> torch.Tensor:
    """
    Granularity-aware WKV attention, evaluated independently per segment.

    ``k`` and ``v`` are ``(B, T, C)`` (a ``(T, C)`` input is treated as B=1).
    ``segments`` is either one list shared by the batch or one list per sample.
    Segments of equal length are batched together; those longer than
    ``dense_max_len`` use the linear-time scan.
    """
    squeeze = k.dim() == 2
    if squeeze:
        k, v = k.unsqueeze(0), v.unsqueeze(0)
    if k.shape != v.shape:
        raise ShapeMismatchError("ga_wkv", tuple(k.shape), tuple(v.shape))
    batch, seq_len, channels = k.shape
    if w.shape != (channels,) or u.shape != (channels,):
        raise ShapeMismatchError("ga_wkv decay/bonus", (channels,), (tuple(w.shape), tuple(u.shape)))

    groups: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
    for b, row in enumerate(_normalize_segments(segments, batch, seq_len)):
        for start, length in row:
            groups[length].append((b, start))

    out = torch.zeros_like(v)
    for length, members in sorted(groups.items()):
        rows = torch.tensor([b for b, _ in members], device=k.device)
        starts = torch.tensor([s for _, s in members], device=k.device)
        positions = starts[:, None] + torch.arange(length, device=k.device)
        rows = rows[:, None].expand_as(positions)
        k_seg, v_seg = k[rows, positions], v[rows, positions]
        if length <= dense_max_len:
            result = _dense_segments(k_seg, v_seg, w, u)
        else:
            result = _scan_segments(k_seg, v_seg, w, u)
        out = out.index_put((rows, positions), result)
    return out.squeeze(0) if squeeze else out


def ga_wkv_scan(
    k: torch.Tensor,
    v: torch.Tensor,
    w: torch.Tensor,
    u: torch.Tensor,
    segments: Sequence[Segment] | Sequence[Sequence[Segment]],
) -> torch.Tensor:
    """:func:`ga_wkv` forced onto the recurrent scan for every segment."""
    return ga_wkv(k, v, w, u, segments, dense_max_len=0)


class TokenShift(nn.Module):
    """LayerNorm followed by the depthwise-convolution shift."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=LN_EPS)
        self.dconv = nn.Conv2d(
            channels, channels, kernel_size, padding=kernel_size // 2, groups=channels, bias=False
        )
        self.alpha = nn.Parameter(torch.zeros(channels))
        self.beta = nn.Parameter(torch.ones(channels))

    def forward(self, x: torch.Tensor, hw: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        return token_shift(
            x, self.alpha, self.beta, self.dconv.weight, self.norm.weight, self.norm.bias, hw
        )


class SpatialMix(nn.Module):
    """
    Spatial mixing over the granularity-reordered sequence.

    With ``disable_partition`` the feature is flattened row-major and the whole
    sequence forms one segment, which is plain bidirectional WKV.
    """

    def __init__(
        self,
        channels: int,
        rwkv: RwkvConfig,
        partition: PartitionConfig,
        disable_partition: bool = False,
    ):
        super().__init__()
        self.shift = TokenShift(channels, rwkv.shift_kernel)
        self.receptance = nn.Linear(channels, channels, bias=False)
        self.key = nn.Linear(channels, channels, bias=False)
        self.value = nn.Linear(channels, channels, bias=False)
        self.output = nn.Linear(channels, channels, bias=False)
        nn.init.zeros_(self.output.weight)

        low, high = rwkv.decay_init
        self.decay = nn.Parameter(
            torch.linspace(low, high, channels), requires_grad=rwkv.learn_decay
        )
        self.bonus = nn.Parameter(
            torch.full((channels,), rwkv.bonus_init), requires_grad=rwkv.learn_decay
        )
        self.dense_max_len = rwkv.dense_max_len
        self.disable_partition = disable_partition
        self.partitioner = SaliencyPartitioner(
            tau=partition.tau,
            hard=partition.hard,
            refine_windows=partition.refine_windows,
            gumbel_noise=partition.gumbel_noise,
        )

    def sequence(
        self,
        shifted: torch.Tensor,
        saliency: Optional[torch.Tensor],
        generator: Optional[torch.Generator] = None,
    ) -> Tuple[TokenSequence, List[List[Segment]], Optional[PartitionState]]:
        """Reorder a shifted ``(B, H, W, C)`` feature into the WKV sequence."""
        batch, height, width, _ = shifted.shape
        if self.disable_partition or saliency is None:
            layout = WindowLayout(height, width, 1)
            return flatten_windows(shifted, layout), [[(0, layout.seq_len)]] * batch, None
        if saliency.shape != (batch, height, width):
            raise ShapeMismatchError("spatial_mix saliency", (batch, height, width), tuple(saliency.shape))
        state = self.partitioner.state(saliency, height * width, self.training, generator)
        sequence, segments = self.partitioner.compose(shifted, state)
        return sequence, segments, state

    def forward(
        self,
        x: torch.Tensor,
        saliency: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ) -> Tuple[torch.Tensor, Optional[PartitionState]]:
        shifted = self.shift(x)
        sequence, segments, state = self.sequence(shifted, saliency, generator)
        r, k, v = project_rkv(
            sequence.tokens, self.receptance.weight, self.key.weight, self.value.weight
        )
        wkv = ga_wkv(k, v, self.decay, self.bonus, segments, self.dense_max_len)
        sequence.tokens = torch.sigmoid(r) * wkv
        return self.output(inverse_window_transform(sequence)), state


class ChannelMix(nn.Module):
    """Channel mixing with a squared-ReLU key path."""

    def __init__(self, channels: int, rwkv: RwkvConfig):
        super().__init__()
        hidden = max(1, int(round(channels * rwkv.hidden_ratio)))
        self.shift = TokenShift(channels, rwkv.shift_kernel)
        self.receptance = nn.Linear(channels, channels, bias=False)
        self.key = nn.Linear(channels, hidden, bias=False)
        self.value = nn.Linear(hidden, channels, bias=False)
        self.output = nn.Linear(channels, channels, bias=False)

    def forward(self, mixed: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
        """O_C for the spatial-mix output ``mixed`` and the block input ``residual``."""
        if mixed.shape != residual.shape:
            raise ShapeMismatchError("channel_mix", tuple(residual.shape), tuple(mixed.shape))
        x_c = self.shift(mixed) + residual
        r_c = self.receptance(x_c)
        v_c = self.value(squared_relu(self.key(x_c)))
        return self.output(torch.sigmoid(r_c) * v_c)


class GAVRWKVBlock(nn.Module):
    """F_next = O_C + (X + O_S)."""

    def __init__(
        self,
        channels: int,
        rwkv: RwkvConfig,
        partition: PartitionConfig,
        disable_partition: bool = False,
    ):
        super().__init__()
        self.spatial = SpatialMix(channels, rwkv, partition, disable_partition)
        self.channel = ChannelMix(channels, rwkv)
        self.last_state: Optional[PartitionState] = None

    def forward(
        self,
        x: torch.Tensor,
        saliency: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        if x.dim() != 4:
            raise ShapeMismatchError("gav_rwkv_block", "(B, H, W, C)", tuple(x.shape))
        o_s, self.last_state = self.spatial(x, saliency, generator)
        o_s = x + o_s
        return self.channel(o_s, x) + o_s
