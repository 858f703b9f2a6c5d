"""
Spectral residual saliency.

All spectral math runs in float64 regardless of the model's precision. The
functions operate on the last two axes, so a leading batch dimension is
carried through unchanged.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn.functional as F

from ..utils.exceptions import ShapeMismatchError, SpectralDomainError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class SpectralData:
    """Intermediate planes of the spectral residual pipeline."""

    amplitude: torch.Tensor
    phase: torch.Tensor
    log_amplitude: torch.Tensor
    avg_log_amplitude: torch.Tensor
    residual: torch.Tensor
    epsilon: float
    kernel_size: int


@dataclass(frozen=True)
class SaliencyMap:
    """Nonnegative saliency over the image grid."""

    data: torch.Tensor
    normalized: bool


def _as_float64(x: torch.Tensor, name: str) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.dim() < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise SpectralDomainError(f"{name} must have at least two non-empty axes")
    if x.is_complex():
        x = x.to(torch.complex128)
        finite = torch.isfinite(x.real).all() and torch.isfinite(x.imag).all()
    else:
        x = x.to(torch.float64)
        finite = torch.isfinite(x).all()
    if not finite:
        raise SpectralDomainError(f"{name} contains non-finite values")
    return x


def to_gray(image: torch.Tensor, channels_first: bool = True) -> torch.Tensor:
    """
    Convert ``(..., 3, H, W)`` RGB to ``(..., H, W)`` luminance.

    Single-channel ``(..., 1, H, W)`` input is squeezed; ``(H, W)`` passes through.
    With ``channels_first=False`` the input is a stack of gray planes
    ``(..., H, W)`` and no axis is mixed, so a ``(3, H, W)`` batch stays three maps.
    """
    image = torch.as_tensor(image)
    if image.dim() == 2 or not channels_first:
        return image.to(torch.float64)
    if image.shape[-3] == 1:
        return image[..., 0, :, :].to(torch.float64)
    if image.shape[-3] != 3:
        raise ShapeMismatchError("to_gray", "(..., 3, H, W)", tuple(image.shape))
    weights = torch.tensor(LUMA_WEIGHTS, dtype=torch.float64, device=image.device)
    return torch.einsum("...chw,c->...hw", image.to(torch.float64), weights)


def dft2(image: torch.Tensor) -> torch.Tensor:
    """Unitary 2-D DFT: F(u,v) = 1/sqrt(HW) * sum x(h,w) exp(-j2pi(hu/H + wv/W))."""
    x = _as_float64(image, "image")
    return torch.fft.fft2(x, norm="ortho")


def idft2(spectrum: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`dft2` under the same unitary convention (complex output)."""
    values = _as_float64(spectrum, "spectrum")
    return torch.fft.ifft2(values, norm="ortho")


def amplitude_phase(spectrum: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Amplitude sqrt(R^2 + I^2) and phase atan2(I, R) in (-pi, pi]; phase(0) = 0."""
    spectrum = torch.as_tensor(spectrum).to(torch.complex128)
    amplitude = torch.sqrt(spectrum.real**2 + spectrum.imag**2)
    phase = torch.atan2(spectrum.imag, spectrum.real)
    phase = torch.where(phase <= -math.pi, torch.full_like(phase, math.pi), phase)
    return amplitude, phase


def log_amplitude(amplitude: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    """Elementwise ln(A + eps)."""
    if epsilon <= 0:
        raise SpectralDomainError(f"epsilon must be positive, got {epsilon}")
    amplitude = torch.as_tensor(amplitude, dtype=torch.float64)
    if (amplitude < 0).any():
        raise SpectralDomainError("amplitude must be nonnegative")
    return torch.log(amplitude + epsilon)


def mean_filter(plane: torch.Tensor, kernel_size: int = 3) -> torch.Tensor:
    """n x n box mean with replicate padding, so constants are fixed points."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise SpectralDomainError(f"kernel size must be odd and positive, got {kernel_size}")
    plane = torch.as_tensor(plane, dtype=torch.float64)
    height, width = plane.shape[-2:]
    if kernel_size > min(height, width):
        raise SpectralDomainError(
            f"kernel size {kernel_size} exceeds plane size {height}x{width}"
        )
    lead = plane.shape[:-2]
    flat = plane.reshape(-1, 1, height, width)
    pad = kernel_size // 2
    padded = F.pad(flat, (pad, pad, pad, pad), mode="replicate")
    out = F.avg_pool2d(padded, kernel_size, stride=1)
    return out.reshape(*lead, height, width)


def spectral_residual(log_amp: torch.Tensor, avg_log_amp: torch.Tensor) -> torch.Tensor:
    """R = L - L_avg."""
    if log_amp.shape != avg_log_amp.shape:
        raise ShapeMismatchError(
            "spectral_residual", tuple(log_amp.shape), tuple(avg_log_amp.shape)
        )
    return log_amp - avg_log_amp


def gaussian_smooth(plane: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with replicate padding; sigma <= 0 is a no-op."""
    if sigma <= 0:
        return plane
    radius = max(1, int(math.ceil(3 * sigma)))
    offsets = torch.arange(-radius, radius + 1, dtype=torch.float64, device=plane.device)
    kernel = torch.exp(-(offsets**2) / (2 * sigma**2))
    kernel = kernel / kernel.sum()

    height, width = plane.shape[-2:]
    lead = plane.shape[:-2]
    x = plane.reshape(-1, 1, height, width)
    x = F.pad(x, (radius, radius, 0, 0), mode="replicate")
    x = F.conv2d(x, kernel.view(1, 1, 1, -1))
    x = F.pad(x, (0, 0, radius, radius), mode="replicate")
    x = F.conv2d(x, kernel.view(1, 1, -1, 1))
    return x.reshape(*lead, height, width)


def min_max_normalize(plane: torch.Tensor) -> torch.Tensor:
    """Per-map min-max scaling to [0, 1]; a constant map becomes all zeros."""
    height, width = plane.shape[-2:]
    flat = plane.reshape(-1, height * width)
    low = flat.min(dim=-1, keepdim=True).values
    span = flat.max(dim=-1, keepdim=True).values - low
    safe = torch.where(span > 0, span, torch.ones_like(span))
    out = torch.where(span > 0, (flat - low) / safe, torch.zeros_like(flat))
    return out.reshape(plane.shape)


def spectral_decomposition(
    image: torch.Tensor, epsilon: float = 1e-6, kernel_size: int = 3
) -> Tuple[SpectralData, torch.Tensor]:
    """Run dft2 through spectral_residual; returns the planes and the spectrum."""
    spectrum = dft2(image)
    amplitude, phase = amplitude_phase(spectrum)
    log_amp = log_amplitude(amplitude, epsilon)
    avg_log_amp = mean_filter(log_amp, kernel_size)
    residual = spectral_residual(log_amp, avg_log_amp)
    data = SpectralData(
        amplitude=amplitude,
        phase=phase,
        log_amplitude=log_amp,
        avg_log_amplitude=avg_log_amp,
        residual=residual,
        epsilon=epsilon,
        kernel_size=kernel_size,
    )
    return data, spectrum


def saliency_map(
    image: torch.Tensor,
    epsilon: float = 1e-6,
    kernel_size: int = 3,
    smooth_sigma: float = 0.0,
    exponentiate: bool = False,
    normalize: bool = True,
    channels_first: bool = True,
) -> SaliencyMap:
    """
    Saliency of a ``(..., C, H, W)`` image with C in {1, 3}, or of a single
    ``(H, W)`` plane.

    Pass ``channels_first=False`` for stacks of gray planes ``(..., H, W)``.
    The residual (or exp of it) is recombined with the original phase,
    inverted, squared in magnitude, optionally smoothed and min-max normalized.
    """
    gray = to_gray(image, channels_first)
    data, _ = spectral_decomposition(gray, epsilon, kernel_size)

    magnitude = torch.exp(data.residual) if exponentiate else data.residual
    recombined = torch.complex(
        magnitude * torch.cos(data.phase), magnitude * torch.sin(data.phase)
    )
    field = idft2(recombined)
    saliency = field.real**2 + field.imag**2
    saliency = gaussian_smooth(saliency, smooth_sigma)
    if normalize:
        saliency = min_max_normalize(saliency)
    return SaliencyMap(data=saliency.clamp_min(0.0), normalized=normalize)
