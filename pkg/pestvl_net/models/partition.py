"""
Saliency-guided window partitioning.

Canonical slot layout: a sequence of T tokens is split into four slots of
T/4 consecutive positions, slot q holding the tokens of coarse window q
(row-major window order). The coarse flattening orders each slot row-major
inside its window; the fine flattening orders each slot by its four fine
sub-windows (row-major), each sub-window row-major. Both flattenings place the
same tokens in the same slot, which is what makes the slot-wise blend of the
two sequences well defined.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from ..utils.exceptions import PartitionLayoutError, ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)

COARSE_WINDOWS = 4
Segment = Tuple[int, int]


@dataclass(frozen=True)
class WindowLayout:
    """Window grid over an ``height x width`` token map."""

    height: int
    width: int
    grid_side: int

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1 or self.grid_side not in (1, 2, 4):
            raise PartitionLayoutError(self.height, self.width, self.grid_side)
        if self.grid_side > 1 and (self.height % 2 or self.width % 2):
            raise PartitionLayoutError(self.height, self.width, self.grid_side)

    @property
    def seq_len(self) -> int:
        return self.height * self.width

    @property
    def window_count(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def tokens_per_window(self) -> int:
        return self.seq_len // self.window_count

    @property
    def fine_divisible(self) -> bool:
        """Whether coarse windows can be split into 2x2 fine windows."""
        return self.height % 4 == 0 and self.width % 4 == 0

    def order(self) -> torch.Tensor:
        """Spatial token id (row * width + col) at every sequence position."""
        ids = torch.arange(self.seq_len).view(self.height, self.width)
        if self.grid_side == 1:
            return ids.reshape(-1)
        h2, w2 = self.height // 2, self.width // 2
        quadrants = ids.view(2, h2, 2, w2).permute(0, 2, 1, 3)
        if self.grid_side == 2 or not self.fine_divisible:
            return quadrants.reshape(-1)
        h4, w4 = h2 // 2, w2 // 2
        fine = quadrants.reshape(2, 2, 2, h4, 2, w4).permute(0, 1, 2, 4, 3, 5)
        return fine.reshape(-1)


@dataclass
class TokenSequence:
    """
    Tokens in sequence order with the spatial id each position came from.

    Sequences produced by :func:`compose_sequence` also carry the two source
    orders and the token mask, which the inverse transform needs for soft masks.
    """

    tokens: torch.Tensor
    provenance: torch.Tensor
    height: int
    width: int
    coarse_provenance: Optional[torch.Tensor] = None
    fine_provenance: Optional[torch.Tensor] = None
    token_mask: Optional[torch.Tensor] = None


@dataclass
class PartitionState:
    """Window energies, selection and masks for one batch."""

    energies: torch.Tensor
    selected_index: torch.Tensor
    window_mask: torch.Tensor
    token_mask: torch.Tensor
    temperature: float
    hard: bool


def coarse_layout(height: int, width: int) -> WindowLayout:
    return WindowLayout(height, width, 2)


def fine_layout(height: int, width: int) -> WindowLayout:
    return WindowLayout(height, width, 4)


def energy_map(saliency: torch.Tensor, grid_side: int = 2) -> torch.Tensor:
    """Per-window saliency sums ``(..., grid_side**2)``, windows row-major."""
    height, width = saliency.shape[-2:]
    if height % grid_side or width % grid_side:
        raise PartitionLayoutError(height, width, grid_side)
    lead = saliency.shape[:-2]
    blocks = saliency.reshape(
        *lead, grid_side, height // grid_side, grid_side, width // grid_side
    )
    return blocks.sum(dim=(-3, -1)).reshape(*lead, grid_side * grid_side)


def topk_select(energies: torch.Tensor, k: int = 1) -> torch.Tensor:
    """Indices ``(..., k)`` of the k largest energies; ties go to the lowest index."""
    if energies.numel() == 0 or energies.shape[-1] == 0:
        raise ValidationError("topk_select needs a non-empty energy vector")
    if not 1 <= k <= energies.shape[-1]:
        raise ValidationError(f"k={k} out of range for {energies.shape[-1]} windows")
    order = torch.sort(energies, dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def sample_gumbel(
    shape: torch.Size | Tuple[int, ...],
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> torch.Tensor:
    """Standard Gumbel(0, 1) noise from an explicit generator."""
    uniform = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    return -torch.log(-torch.log(uniform.clamp_min(1e-20)))


class _StraightThrough(torch.autograd.Function):
    """Forward the hard mask exactly; backward through the soft mask."""

    @staticmethod
    def forward(ctx, soft: torch.Tensor, hard: torch.Tensor) -> torch.Tensor:  # type: ignore[override]
        return hard.clone()

    @staticmethod
    def backward(ctx, grad: torch.Tensor) -> Tuple[torch.Tensor, None]:  # type: ignore[override]
        return grad, None


def gumbel_softmax(
    energies: torch.Tensor,
    tau: float = 1.0,
    hard: bool = True,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
    k: int = 1,
) -> torch.Tensor:
    """
    Differentiable window mask softmax((s + g) / tau).

    With ``hard`` the forward value is the (k-)hot mask of the perturbed
    argmax and gradients follow the soft mask. ``noise`` overrides sampling.
    """
    if tau <= 0:
        raise ValidationError(f"Gumbel-Softmax temperature must be positive, got {tau}")
    if noise is None:
        noise = sample_gumbel(
            energies.shape, generator, dtype=energies.dtype, device=energies.device
        )
    soft = F.softmax((energies + noise) / tau, dim=-1)
    if not hard:
        return soft
    index = topk_select(soft.detach(), k)
    hard_mask = torch.zeros_like(soft).scatter(-1, index, 1.0)
    return _StraightThrough.apply(soft, hard_mask)


def upsample_mask(window_mask: torch.Tensor, seq_len: int) -> torch.Tensor:
    """Broadcast each coarse window's mask value over its T/4 sequence slot."""
    windows = window_mask.shape[-1]
    if seq_len % windows:
        raise ShapeMismatchError("upsample_mask", f"multiple of {windows}", seq_len)
    return window_mask.repeat_interleave(seq_len // windows, dim=-1)


def flatten_windows(feature: torch.Tensor, layout: WindowLayout) -> TokenSequence:
    """Flatten a ``(B, H, W, C)`` feature in the layout's canonical order."""
    if feature.dim() != 4 or feature.shape[1:3] != (layout.height, layout.width):
        raise ShapeMismatchError(
            "flatten_windows", f"(B, {layout.height}, {layout.width}, C)", tuple(feature.shape)
        )
    batch, channels = feature.shape[0], feature.shape[-1]
    order = layout.order().to(feature.device)
    tokens = feature.reshape(batch, layout.seq_len, channels)[:, order]
    return TokenSequence(
        tokens=tokens,
        provenance=order.expand(batch, -1),
        height=layout.height,
        width=layout.width,
    )


def compose_sequence(
    coarse: TokenSequence, fine: TokenSequence, token_mask: torch.Tensor
) -> TokenSequence:
    """L_pst = (1 - M_L) * L_N1 + M_L * L_N2, slot by slot."""
    if coarse.tokens.shape != fine.tokens.shape:
        raise ShapeMismatchError(
            "compose_sequence", tuple(coarse.tokens.shape), tuple(fine.tokens.shape)
        )
    if token_mask.shape != coarse.tokens.shape[:2]:
        raise ShapeMismatchError(
            "compose_sequence", tuple(coarse.tokens.shape[:2]), tuple(token_mask.shape)
        )
    mask = token_mask.unsqueeze(-1).to(coarse.tokens.dtype)
    tokens = (1 - mask) * coarse.tokens + mask * fine.tokens
    provenance = torch.where(token_mask >= 0.5, fine.provenance, coarse.provenance)
    return TokenSequence(
        tokens=tokens,
        provenance=provenance,
        height=coarse.height,
        width=coarse.width,
        coarse_provenance=coarse.provenance[0],
        fine_provenance=fine.provenance[0],
        token_mask=token_mask,
    )


def _check_permutation(order: torch.Tensor, seq_len: int) -> None:
    expected = torch.arange(seq_len, device=order.device).expand_as(order)
    if order.shape[-1] != seq_len or not torch.equal(order.sort(dim=-1).values, expected):
        raise ValidationError("Sequence provenance is not a permutation of the token ids")


def _unpermute(tokens: torch.Tensor, order: torch.Tensor) -> torch.Tensor:
    inverse = torch.argsort(order, dim=-1)
    if inverse.dim() == 1:
        inverse = inverse.expand(tokens.shape[0], -1)
    return tokens.gather(1, inverse.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


def inverse_window_transform(sequence: TokenSequence) -> torch.Tensor:
    """
    Return tokens to their ``(B, H, W, C)`` positions.

    Blended sequences use the adjoint of the blend; for a hard mask this is
    exactly the inverse permutation.
    """
    tokens = sequence.tokens
    batch, seq_len, channels = tokens.shape
    if seq_len != sequence.height * sequence.width:
        raise ShapeMismatchError(
            "inverse_window_transform", sequence.height * sequence.width, seq_len
        )

    if sequence.token_mask is None:
        _check_permutation(sequence.provenance, seq_len)
        spatial = _unpermute(tokens, sequence.provenance)
    else:
        assert sequence.coarse_provenance is not None
        assert sequence.fine_provenance is not None
        _check_permutation(sequence.coarse_provenance, seq_len)
        _check_permutation(sequence.fine_provenance, seq_len)
        mask = sequence.token_mask.unsqueeze(-1).to(tokens.dtype)
        spatial = _unpermute((1 - mask) * tokens, sequence.coarse_provenance) + _unpermute(
            mask * tokens, sequence.fine_provenance
        )
    return spatial.reshape(batch, sequence.height, sequence.width, channels)


def local_scan_order(layout: WindowLayout) -> torch.Tensor:
    """Attention-time ordering: window-contiguous, equal to the canonical order."""
    return layout.order()


def window_segments(layout: WindowLayout) -> List[Segment]:
    """Contiguous (start, length) ranges of the layout's windows."""
    if layout.grid_side == 4 and not layout.fine_divisible:
        return window_segments(coarse_layout(layout.height, layout.width))
    size = layout.tokens_per_window
    return [(start, size) for start in range(0, layout.seq_len, size)]


def composed_segments(selected: torch.Tensor, layout: WindowLayout) -> List[List[Segment]]:
    """
    Per-sample segments of a composed sequence.

    ``selected`` is a ``(B, 4)`` boolean mask of refined coarse windows; those
    slots are split into their four fine windows, the others stay whole.
    """
    slot = layout.seq_len // COARSE_WINDOWS
    split = layout.fine_divisible
    result: List[List[Segment]] = []
    for row in selected.tolist():
        segments: List[Segment] = []
        for q, refined in enumerate(row):
            start = q * slot
            if refined and split:
                segments.extend((start + j * (slot // 4), slot // 4) for j in range(4))
            else:
                segments.append((start, slot))
        result.append(segments)
    return result


def validate_segments(segments: Sequence[Segment], seq_len: int) -> None:
    """Segments must tile [0, seq_len) in order without gaps or overlap."""
    position = 0
    for start, length in segments:
        if length < 1:
            raise ValidationError("Empty WKV segment")
        if start != position:
            raise ValidationError(f"Segments do not tile the sequence at position {position}")
        position += length
    if position != seq_len:
        raise ValidationError(f"Segments cover {position} of {seq_len} tokens")


class SaliencyPartitioner:
    """
    Builds the granularity-reordered sequence for one GAV-RWKV block.

    Holds no learnable state; the Gumbel generator is passed per call.
    """

    def __init__(
        self,
        tau: float = 1.0,
        hard: bool = True,
        refine_windows: int = 1,
        gumbel_noise: bool = True,
    ):
        self.tau = tau
        self.hard = hard
        self.refine_windows = refine_windows
        self.gumbel_noise = gumbel_noise

    def state(
        self,
        saliency: torch.Tensor,
        seq_len: int,
        training: bool,
        generator: Optional[torch.Generator] = None,
    ) -> PartitionState:
        """Energies, window mask and token mask for a ``(B, H, W)`` saliency map."""
        energies = energy_map(saliency, 2)
        noise = None
        if not (training and self.gumbel_noise):
            noise = torch.zeros_like(energies)
        window_mask = gumbel_softmax(
            energies,
            tau=self.tau,
            hard=self.hard,
            noise=noise,
            generator=generator,
            k=self.refine_windows,
        )
        return PartitionState(
            energies=energies,
            selected_index=topk_select(window_mask.detach(), self.refine_windows),
            window_mask=window_mask,
            token_mask=upsample_mask(window_mask, seq_len),
            temperature=self.tau,
            hard=self.hard,
        )

    def compose(
        self, feature: torch.Tensor, state: PartitionState
    ) -> Tuple[TokenSequence, List[List[Segment]]]:
        """Reorder a ``(B, H, W, C)`` feature and return the WKV segments."""
        height, width = feature.shape[1:3]
        coarse = coarse_layout(height, width)
        sequence = compose_sequence(
            flatten_windows(feature, coarse),
            flatten_windows(feature, fine_layout(height, width)),
            state.token_mask,
        )
        selected = torch.zeros_like(state.window_mask, dtype=torch.bool)
        selected.scatter_(-1, state.selected_index, True)
        return sequence, composed_segments(selected, coarse)
