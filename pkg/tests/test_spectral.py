"""
Tests for the spectral residual saliency pipeline.
"""

import math

import numpy as np
import pytest
import torch

from pestvl_net.models.spectral import (
    amplitude_phase,
    dft2,
    gaussian_smooth,
    idft2,
    log_amplitude,
    mean_filter,
    min_max_normalize,
    saliency_map,
    spectral_residual,
    to_gray,
)
from pestvl_net.utils import oracles
from pestvl_net.utils.exceptions import ShapeMismatchError, SpectralDomainError

pytestmark = pytest.mark.unit


class TestDft:
    def test_single_pixel(self):
        spectrum = dft2(torch.tensor([[0.7]]))
        assert spectrum.real.item() == pytest.approx(0.7)
        assert spectrum.imag.item() == 0.0

    def test_impulse_has_flat_amplitude(self):
        image = torch.zeros(4, 6)
        image[0, 0] = 1.0
        amplitude, _ = amplitude_phase(dft2(image))
        assert torch.allclose(amplitude, torch.full((4, 6), 1 / math.sqrt(24), dtype=torch.float64))

    @pytest.mark.parametrize("size", [4, 8, 16])
    def test_matches_direct_sum(self, size):
        image = np.random.default_rng(size).standard_normal((size, size))
        spectrum = dft2(torch.from_numpy(image)).numpy()
        assert np.abs(spectrum - oracles.naive_dft2(image)).max() < 1e-10

    def test_round_trip(self):
        image = np.random.default_rng(1).standard_normal((8, 8))
        restored = idft2(dft2(torch.from_numpy(image))).real.numpy()
        assert np.abs(restored - image).max() < 1e-9

    def test_zero_spectrum_gives_zero_field(self):
        field = idft2(torch.zeros(4, 4, dtype=torch.complex128))
        assert torch.count_nonzero(field) == 0

    def test_inverse_matches_direct_sum(self):
        rng = np.random.default_rng(2)
        spectrum = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
        field = idft2(torch.from_numpy(spectrum)).numpy()
        assert np.abs(field - oracles.naive_idft2(spectrum)).max() < 1e-10

    def test_batch_axes_are_carried(self):
        images = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        spectrum = dft2(images)
        assert spectrum.shape == (2, 3, 4, 4)
        assert torch.allclose(spectrum[1, 2], dft2(images[1, 2]))

    @pytest.mark.parametrize("shape", [(1, 1), (4, 6), (8, 8), (13, 7)])
    def test_energy_is_preserved(self, shape):
        rng = np.random.default_rng(sum(shape))
        for _ in range(20):
            image = rng.standard_normal(shape) * rng.uniform(0.1, 100.0)
            spectrum = dft2(torch.from_numpy(image))
            energy = float(np.sum(image**2))
            spectral_energy = float((spectrum.real**2 + spectrum.imag**2).sum())
            assert spectral_energy == pytest.approx(energy, rel=1e-8)

    def test_rejects_non_finite(self):
        with pytest.raises(SpectralDomainError):
            dft2(torch.tensor([[1.0, float("nan")]]))

    def test_rejects_one_dimensional_input(self):
        with pytest.raises(SpectralDomainError):
            dft2(torch.ones(4))


class TestAmplitudePhase:
    def test_three_four_five(self):
        amplitude, phase = amplitude_phase(torch.tensor([[3 + 4j]], dtype=torch.complex128))
        assert amplitude.item() == pytest.approx(5.0)
        assert phase.item() == pytest.approx(math.atan2(4, 3))

    def test_zero_has_zero_phase(self):
        amplitude, phase = amplitude_phase(torch.zeros(1, 1, dtype=torch.complex128))
        assert amplitude.item() == 0.0
        assert phase.item() == 0.0

    def test_real_image_spectrum_is_conjugate_symmetric(self):
        image = torch.rand(6, 8, dtype=torch.float64)
        amplitude, _ = amplitude_phase(dft2(image))
        mirrored = torch.roll(torch.flip(amplitude, dims=(0, 1)), shifts=(1, 1), dims=(0, 1))
        assert torch.allclose(amplitude, mirrored, atol=1e-12)


class TestLogAmplitude:
    def test_zero_amplitude(self):
        assert log_amplitude(torch.tensor([[0.0]]), 1e-6).item() == pytest.approx(-13.815510557964274)

    def test_unit_amplitude(self):
        assert log_amplitude(torch.tensor([[1.0]]), 1e-6).item() == pytest.approx(math.log1p(1e-6))

    def test_elementwise(self):
        amplitude = np.random.default_rng(3).uniform(0, 5, (5, 5))
        result = log_amplitude(torch.from_numpy(amplitude), 1e-3).numpy()
        assert np.allclose(result, np.log(amplitude + 1e-3))

    def test_rejects_bad_inputs(self):
        with pytest.raises(SpectralDomainError):
            log_amplitude(torch.tensor([[1.0]]), 0.0)
        with pytest.raises(SpectralDomainError):
            log_amplitude(torch.tensor([[-1.0]]), 1e-6)


class TestMeanFilter:
    @pytest.mark.parametrize("kernel_size", [1, 3, 5])
    def test_constant_is_fixed_point(self, kernel_size):
        plane = torch.full((7, 9), 2.5, dtype=torch.float64)
        assert torch.allclose(mean_filter(plane, kernel_size), plane, atol=1e-14)

    def test_center_of_three_by_three(self):
        plane = torch.tensor([[1.0, 2, 3], [4, 5, 6], [7, 8, 9]])
        assert mean_filter(plane, 3)[1, 1].item() == pytest.approx(5.0)

    def test_matches_windowed_mean(self):
        plane = np.random.default_rng(4).standard_normal((16, 16))
        result = mean_filter(torch.from_numpy(plane), 3).numpy()
        assert np.abs(result - oracles.naive_mean_filter(plane, 3)).max() < 1e-12

    @pytest.mark.parametrize("kernel_size", [3, 5])
    @pytest.mark.parametrize("shift", [(0, 1), (2, 3), (4, 0)])
    def test_interior_is_shift_equivariant(self, kernel_size, shift):
        size, pad = 16, kernel_size // 2
        dy, dx = shift
        for seed in range(10):
            canvas = np.random.default_rng(seed).standard_normal((size + dy, size + dx))
            base = mean_filter(torch.from_numpy(canvas[:size, :size]), kernel_size).numpy()
            moved = mean_filter(torch.from_numpy(canvas[dy:, dx:]), kernel_size).numpy()
            rows = slice(pad, size - pad - dy)
            cols = slice(pad, size - pad - dx)
            shifted_rows = slice(pad + dy, size - pad)
            shifted_cols = slice(pad + dx, size - pad)
            assert np.abs(moved[rows, cols] - base[shifted_rows, shifted_cols]).max() < 1e-12

    def test_rejects_bad_kernels(self):
        plane = torch.zeros(4, 4)
        with pytest.raises(SpectralDomainError):
            mean_filter(plane, 2)
        with pytest.raises(SpectralDomainError):
            mean_filter(plane, 5)


class TestSpectralResidual:
    def test_constant_log_spectrum(self):
        plane = torch.full((4, 4), 3.0, dtype=torch.float64)
        assert torch.count_nonzero(spectral_residual(plane, plane)) == 0

    def test_scalar(self):
        result = spectral_residual(torch.tensor([[2.0]]), torch.tensor([[0.5]]))
        assert result.item() == pytest.approx(1.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            spectral_residual(torch.zeros(2, 2), torch.zeros(2, 3))


class TestSaliencyMap:
    def test_impulse_gives_zero_saliency(self):
        image = torch.zeros(8, 8, dtype=torch.float64)
        image[0, 0] = 1.0
        result = saliency_map(image, normalize=False)
        assert result.data.abs().max().item() < 1e-12
        assert not result.normalized

    def test_matches_composed_oracle(self):
        image = np.random.default_rng(5).uniform(0, 1, (8, 8))
        result = saliency_map(torch.from_numpy(image), normalize=False).data.numpy()
        assert np.abs(result - oracles.naive_saliency(image)).max() < 1e-8

    def test_exponentiated_matches_composed_oracle(self):
        image = np.random.default_rng(6).uniform(0, 1, (8, 8))
        result = saliency_map(torch.from_numpy(image), exponentiate=True, normalize=False).data.numpy()
        expected = oracles.naive_saliency(image, exponentiate=True)
        assert np.abs(result - expected).max() < 1e-8 * max(1.0, np.abs(expected).max())

    def test_normalized_range(self):
        result = saliency_map(torch.rand(3, 16, 16), smooth_sigma=1.0)
        assert result.data.min() >= 0.0
        assert result.data.max() <= 1.0
        assert result.data.shape == (16, 16)

    def test_rgb_uses_luminance(self):
        image = torch.rand(3, 8, 8, dtype=torch.float64)
        gray = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
        assert torch.allclose(to_gray(image), gray)
        assert torch.allclose(saliency_map(image).data, saliency_map(gray).data)

    def test_stack_of_gray_planes_is_not_mixed(self):
        planes = torch.rand(3, 8, 8, dtype=torch.float64)
        assert torch.equal(to_gray(planes, channels_first=False), planes)
        result = saliency_map(planes, channels_first=False).data
        assert result.shape == (3, 8, 8)
        for i in range(3):
            assert torch.allclose(result[i], saliency_map(planes[i]).data)

    def test_rejects_wrong_channel_count(self):
        with pytest.raises(ShapeMismatchError):
            to_gray(torch.zeros(2, 4, 4))


def test_min_max_normalize_constant_map_is_zero():
    assert torch.count_nonzero(min_max_normalize(torch.full((3, 3), 4.0))) == 0


def test_gaussian_smooth_preserves_constants():
    plane = torch.full((6, 6), 0.3, dtype=torch.float64)
    assert torch.allclose(gaussian_smooth(plane, 1.5), plane)
    assert gaussian_smooth(plane, 0.0) is plane
