"""
Brute-force reference implementations.

Naive loops over numpy arrays plus a central-difference gradient checker.
They are used by the test-suite and by the ``self-test`` subcommand to check
the vectorized kernels; nothing in the training path calls them.
"""

import math
from typing import Sequence

import numpy as np
import torch


def naive_dft2(x: np.ndarray) -> np.ndarray:
    """Direct O((HW)^2) unitary DFT."""
    height, width = x.shape
    out = np.zeros((height, width), dtype=np.complex128)
    scale = 1.0 / math.sqrt(height * width)
    for u in range(height):
        for v in range(width):
            acc = 0j
            for h in range(height):
                for w in range(width):
                    angle = -2.0 * math.pi * (h * u / height + w * v / width)
                    acc += x[h, w] * complex(math.cos(angle), math.sin(angle))
            out[u, v] = acc * scale
    return out


def naive_idft2(spectrum: np.ndarray) -> np.ndarray:
    """Direct O((HW)^2) unitary inverse DFT."""
    height, width = spectrum.shape
    out = np.zeros((height, width), dtype=np.complex128)
    scale = 1.0 / math.sqrt(height * width)
    for h in range(height):
        for w in range(width):
            acc = 0j
            for u in range(height):
                for v in range(width):
                    angle = 2.0 * math.pi * (h * u / height + w * v / width)
                    acc += spectrum[u, v] * complex(math.cos(angle), math.sin(angle))
            out[h, w] = acc * scale
    return out


def naive_mean_filter(plane: np.ndarray, kernel_size: int) -> np.ndarray:
    """Windowed mean with edge-clamped indices."""
    height, width = plane.shape
    radius = kernel_size // 2
    out = np.zeros_like(plane, dtype=np.float64)
    for i in range(height):
        for j in range(width):
            total = 0.0
            for di in range(-radius, radius + 1):
                for dj in range(-radius, radius + 1):
                    ii = min(max(i + di, 0), height - 1)
                    jj = min(max(j + dj, 0), width - 1)
                    total += plane[ii, jj]
            out[i, j] = total / (kernel_size * kernel_size)
    return out


def naive_saliency(
    image: np.ndarray, epsilon: float = 1e-6, kernel_size: int = 3, exponentiate: bool = False
) -> np.ndarray:
    """Composition of the naive oracles; unnormalized squared magnitude."""
    spectrum = naive_dft2(image)
    amplitude = np.sqrt(spectrum.real**2 + spectrum.imag**2)
    phase = np.arctan2(spectrum.imag, spectrum.real)
    log_amp = np.log(amplitude + epsilon)
    residual = log_amp - naive_mean_filter(log_amp, kernel_size)
    magnitude = np.exp(residual) if exponentiate else residual
    field = naive_idft2(magnitude * np.cos(phase) + 1j * magnitude * np.sin(phase))
    return field.real**2 + field.imag**2


def naive_wkv(
    k: np.ndarray, v: np.ndarray, w: np.ndarray, u: np.ndarray, segments: Sequence[tuple[int, int]]
) -> np.ndarray:
    """
    Direct evaluation of the windowed WKV formula, one segment at a time.

    ``k`` and ``v`` are ``(T, C)``; decay is normalized by the segment length.
    """
    seq_len, channels = k.shape
    out = np.zeros((seq_len, channels), dtype=np.float64)
    for start, length in segments:
        for c in range(channels):
            for t in range(length):
                num = math.exp(u[c] + k[start + t, c]) * v[start + t, c]
                den = math.exp(u[c] + k[start + t, c])
                for i in range(length):
                    if i == t:
                        continue
                    weight = math.exp(-(abs(t - i) - 1) / length * w[c] + k[start + i, c])
                    num += weight * v[start + i, c]
                    den += weight
                out[start + t, c] = num / den
    return out


def naive_conv2d(
    x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0, groups: int = 1
) -> np.ndarray:
    """Sliding-window convolution for ``(C_in, H, W)`` input, zero padding."""
    c_in, height, width = x.shape
    c_out, c_per_group, kh, kw = weight.shape
    padded = np.zeros((c_in, height + 2 * padding, width + 2 * padding), dtype=np.float64)
    padded[:, padding : padding + height, padding : padding + width] = x
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, out_h, out_w), dtype=np.float64)
    out_per_group = c_out // groups
    for o in range(c_out):
        group = o // out_per_group
        for i in range(out_h):
            for j in range(out_w):
                total = 0.0
                for c in range(c_per_group):
                    src = group * c_per_group + c
                    for a in range(kh):
                        for b in range(kw):
                            total += (
                                padded[src, i * stride + a, j * stride + b] * weight[o, c, a, b]
                            )
                out[o, i, j] = total
    return out


def naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    """Triple-loop softmax(q k^T / scale) v for ``(Tq, d)``, ``(Tk, d)``, ``(Tk, dv)``."""
    tq, tk, dv = q.shape[0], k.shape[0], v.shape[1]
    out = np.zeros((tq, dv), dtype=np.float64)
    for i in range(tq):
        logits = [sum(q[i, a] * k[j, a] for a in range(q.shape[1])) / scale for j in range(tk)]
        peak = max(logits)
        weights = [math.exp(l - peak) for l in logits]
        total = sum(weights)
        for j in range(tk):
            for c in range(dv):
                out[i, c] += weights[j] / total * v[j, c]
    return out


def finite_difference_error(fn, inputs, h: float = 1e-6, seed: int = 0) -> float:
    """
    Max relative gap between autograd and central differences.

    ``fn`` maps the tensors in ``inputs`` to a tensor; the scalar checked is
    ``sum(fn(*inputs) * r)`` for a fixed random ``r``. Inputs must require grad.
    """
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        reference = fn(*inputs)
    weights = torch.randn(reference.shape, generator=generator, dtype=reference.dtype)

    def scalar() -> torch.Tensor:
        return (fn(*inputs) * weights).sum()

    for tensor in inputs:
        tensor.grad = None
    scalar().backward()
    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad.detach().clone().reshape(-1)
        flat = tensor.data.reshape(-1)
        for i in range(flat.numel()):
            original = float(flat[i])
            with torch.no_grad():
                flat[i] = original + h
                plus = float(scalar())
                flat[i] = original - h
                minus = float(scalar())
                flat[i] = original
            numeric = (plus - minus) / (2 * h)
            gap = abs(numeric - float(analytic[i])) / max(1.0, abs(numeric))
            worst = max(worst, gap)
    return worst
