"""
Embedded oracle suites for the ``self-test`` subcommand.

Kernels are looked up through their modules at call time, so a patched
module attribute is what gets tested.
"""

import logging
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from ..models import fusion, partition, rwkv, spectral
from ..schemas.cli import SelfTestReport, SuiteResult
from ..schemas.config import RwkvConfig
from ..utils import oracles

logger = logging.getLogger(__name__)

SUITE_TOLERANCES: Dict[str, float] = {
    "dft": 1e-10,
    "wkv": 1e-6,
    "attention": 1e-10,
    "gradients": 1e-6,
}


def _dft_suite(rng: np.random.Generator) -> float:
    worst = 0.0
    for size in (4, 8):
        image = rng.standard_normal((size, size))
        spectrum = spectral.dft2(torch.from_numpy(image)).numpy()
        worst = max(worst, float(np.abs(spectrum - oracles.naive_dft2(image)).max()))
        restored = spectral.idft2(torch.from_numpy(spectrum)).numpy()
        worst = max(worst, float(np.abs(restored - image).max()))
    return worst


def _wkv_suite(rng: np.random.Generator) -> float:
    segments = [(0, 1), (1, 4), (5, 8), (13, 16)]
    seq_len, channels = 29, 3
    k = rng.standard_normal((seq_len, channels))
    v = rng.standard_normal((seq_len, channels))
    w = rng.uniform(0.0, 4.0, channels)
    u = rng.standard_normal(channels)
    expected = oracles.naive_wkv(k, v, w, u, segments)
    tensors = [torch.from_numpy(a) for a in (k, v, w, u)]
    worst = 0.0
    for kernel in (rwkv.ga_wkv, rwkv.ga_wkv_scan):
        out = kernel(*tensors, segments).numpy()
        worst = max(worst, float((np.abs(out - expected) / (1.0 + np.abs(expected))).max()))
    return worst


def _attention_suite(rng: np.random.Generator) -> float:
    visual = rng.standard_normal((1, 4, 6))
    text = rng.standard_normal((1, 3, 5))
    w_q, w_k, w_v = rng.standard_normal((4, 6)), rng.standard_normal((4, 5)), rng.standard_normal((6, 5))
    out = fusion.cross_attention(*(torch.from_numpy(a) for a in (visual, text, w_q, w_k, w_v)))
    expected = oracles.naive_attention(
        visual[0] @ w_q.T, text[0] @ w_k.T, text[0] @ w_v.T, scale=float(np.sqrt(4))
    )
    return float(np.abs(out[0].numpy() - expected).max())


def _gradient_suite(rng: np.random.Generator) -> float:
    def leaf(*shape: int) -> torch.Tensor:
        return torch.from_numpy(rng.standard_normal(shape)).requires_grad_(True)

    segments = [(0, 4), (4, 5)]
    k, v = leaf(9, 2), leaf(9, 2)
    w = torch.from_numpy(rng.uniform(0.5, 3.0, 2)).requires_grad_(True)
    u = leaf(2)
    worst = oracles.finite_difference_error(
        lambda k, v, w, u: rwkv.ga_wkv(k, v, w, u, segments), [k, v, w, u]
    )

    x, alpha, beta, kernel = leaf(1, 3, 3, 2), leaf(2), leaf(2), leaf(2, 1, 3, 3)
    worst = max(worst, oracles.finite_difference_error(rwkv.token_shift, [x, alpha, beta, kernel]))

    visual, text = leaf(1, 4, 3), leaf(1, 2, 2)
    w_q, w_k, w_v = leaf(2, 3), leaf(2, 2), leaf(3, 2)
    worst = max(
        worst,
        oracles.finite_difference_error(fusion.cross_attention, [visual, text, w_q, w_k, w_v]),
    )

    mix = rwkv.ChannelMix(2, RwkvConfig(hidden_ratio=2.0)).double()
    with torch.no_grad():
        for param in mix.parameters():
            param.copy_(torch.from_numpy(rng.standard_normal(tuple(param.shape)) * 0.5))
    mixed, residual = leaf(1, 3, 3, 2), leaf(1, 3, 3, 2)
    worst = max(
        worst,
        oracles.finite_difference_error(
            lambda mixed, residual, *_: mix(mixed, residual),
            [mixed, residual, *mix.parameters()],
        ),
    )

    noise = torch.from_numpy(-np.log(-np.log(rng.uniform(1e-6, 1.0, (2, 4)))))
    energies = leaf(2, 4)
    worst = max(
        worst,
        oracles.finite_difference_error(
            lambda e: partition.gumbel_softmax(e, tau=1.0, hard=False, noise=noise), [energies]
        ),
    )
    return worst


SUITES: Dict[str, Callable[[np.random.Generator], float]] = {
    "dft": _dft_suite,
    "wkv": _wkv_suite,
    "attention": _attention_suite,
    "gradients": _gradient_suite,
}


def run_self_test(suites: Optional[Sequence[str]] = None, seed: int = 0) -> SelfTestReport:
    """
    Run the named oracle suites (all by default).

    A suite fails when its max error exceeds its tolerance or it raises.
    """
    results: List[SuiteResult] = []
    for name in suites or list(SUITES):
        tolerance = SUITE_TOLERANCES[name]
        started = time.perf_counter()
        try:
            error = SUITES[name](np.random.default_rng(seed))
            passed, detail = bool(error <= tolerance), ""
        except Exception as e:
            error, passed, detail = float("inf"), False, f"{type(e).__name__}: {e}"
        results.append(
            SuiteResult(name=name, passed=passed, max_error=error, tolerance=tolerance, detail=detail)
        )
        level = logging.INFO if passed else logging.ERROR
        logger.log(
            level,
            f"Self-test suite {name}: {'pass' if passed else 'FAIL'} "
            f"(max error {error:.3e}, {time.perf_counter() - started:.2f}s)",
        )
    return SelfTestReport(suites=results)
