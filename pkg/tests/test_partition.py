"""
Tests for saliency-guided window partitioning.
"""

import numpy as np
import pytest
import torch

from pestvl_net.models.partition import (
    SaliencyPartitioner,
    WindowLayout,
    coarse_layout,
    compose_sequence,
    composed_segments,
    energy_map,
    fine_layout,
    flatten_windows,
    gumbel_softmax,
    inverse_window_transform,
    local_scan_order,
    sample_gumbel,
    topk_select,
    upsample_mask,
    validate_segments,
    window_segments,
)
from pestvl_net.utils import oracles
from pestvl_net.utils.exceptions import PartitionLayoutError, ValidationError

pytestmark = pytest.mark.unit


def is_permutation(order: torch.Tensor, size: int) -> bool:
    return torch.equal(order.sort().values, torch.arange(size))


class TestEnergyMap:
    def test_mass_in_top_left_quadrant(self):
        saliency = torch.zeros(4, 4)
        saliency[0, 0], saliency[1, 1] = 2.0, 3.0
        assert energy_map(saliency).tolist() == [5.0, 0.0, 0.0, 0.0]

    def test_uniform_map_has_equal_energies(self):
        energies = energy_map(torch.full((6, 6), 0.5))
        assert torch.allclose(energies, torch.full((4,), 4.5))

    def test_matches_quadrant_sums(self):
        saliency = np.random.default_rng(0).uniform(0, 1, (8, 8))
        expected = [
            saliency[:4, :4].sum(),
            saliency[:4, 4:].sum(),
            saliency[4:, :4].sum(),
            saliency[4:, 4:].sum(),
        ]
        assert np.allclose(energy_map(torch.from_numpy(saliency)).numpy(), expected)

    def test_batched(self):
        saliency = torch.rand(3, 8, 8)
        energies = energy_map(saliency)
        assert energies.shape == (3, 4)
        assert torch.allclose(energies[2], energy_map(saliency[2]))

    def test_quadrant_swaps_permute_energies(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            side = int(rng.choice([2, 4, 8, 16])) // 2
            saliency = torch.from_numpy(rng.uniform(0, 1, (2 * side, 2 * side)))
            permutation = torch.from_numpy(rng.permutation(4))
            quadrants = saliency.reshape(2, side, 2, side).permute(0, 2, 1, 3).reshape(4, side, side)
            swapped = (
                quadrants[permutation].reshape(2, 2, side, side).permute(0, 2, 1, 3).reshape(2 * side, 2 * side)
            )
            assert torch.allclose(energy_map(swapped), energy_map(saliency)[permutation], atol=1e-12)

    def test_swapping_two_quadrants(self):
        saliency = torch.zeros(4, 4)
        saliency[0, 0] = 1.0
        saliency[3, 3] = 7.0
        swapped = saliency.clone()
        swapped[:2, :2], swapped[2:, 2:] = saliency[2:, 2:], saliency[:2, :2]
        assert energy_map(saliency).tolist() == [1.0, 0.0, 0.0, 7.0]
        assert energy_map(swapped).tolist() == [7.0, 0.0, 0.0, 1.0]

    def test_odd_size_rejected(self):
        with pytest.raises(PartitionLayoutError):
            energy_map(torch.zeros(5, 4))


class TestTopkSelect:
    def test_argmax(self):
        assert topk_select(torch.tensor([1.0, 5.0, 2.0, 0.0])).tolist() == [1]

    def test_ties_go_to_lowest_index(self):
        assert topk_select(torch.tensor([3.0, 3.0, 3.0, 3.0])).tolist() == [0]
        assert topk_select(torch.tensor([1.0, 4.0, 4.0, 0.0]), k=2).tolist() == [1, 2]

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            energies = rng.standard_normal(4)
            best = 0
            for i in range(1, 4):
                if energies[i] > energies[best]:
                    best = i
            assert topk_select(torch.from_numpy(energies)).item() == best

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_invariant_under_positive_affine_rescale(self, k):
        rng = np.random.default_rng(k)
        for _ in range(200):
            energies = torch.from_numpy(rng.standard_normal(4))
            scale, offset = rng.uniform(0.1, 10.0), rng.uniform(-5.0, 5.0)
            assert torch.equal(topk_select(scale * energies + offset, k), topk_select(energies, k))

    def test_affine_rescale_keeps_tie_breaking(self):
        energies = torch.tensor([2.0, 2.0, 1.0, 2.0])
        assert topk_select(3.0 * energies + 1.0, k=2).tolist() == [0, 1]

    def test_rejects_bad_k(self):
        with pytest.raises(ValidationError):
            topk_select(torch.ones(4), k=5)
        with pytest.raises(ValidationError):
            topk_select(torch.ones(0))


class TestGumbelSoftmax:
    def test_low_temperature_approaches_one_hot(self):
        energies = torch.tensor([0.2, 0.5, 0.1, 0.3])
        mask = gumbel_softmax(energies, tau=0.01, hard=False, noise=torch.zeros(4))
        assert torch.allclose(mask, torch.tensor([0.0, 1.0, 0.0, 0.0]), atol=1e-3)

    def test_sums_to_one(self):
        generator = torch.Generator().manual_seed(0)
        for tau in (0.1, 1.0, 5.0):
            mask = gumbel_softmax(torch.rand(16, 4), tau=tau, hard=False, generator=generator)
            assert torch.allclose(mask.sum(dim=-1), torch.ones(16), atol=1e-6)

    def test_hard_forward_is_one_hot(self):
        energies = torch.tensor([[0.1, 0.9, 0.3, 0.2]])
        mask = gumbel_softmax(energies, tau=1.0, hard=True, noise=torch.zeros(1, 4))
        assert mask.tolist() == [[0.0, 1.0, 0.0, 0.0]]

    def test_hard_k_hot(self):
        energies = torch.tensor([0.1, 0.9, 0.3, 0.2])
        mask = gumbel_softmax(energies, hard=True, noise=torch.zeros(4), k=2)
        assert mask.tolist() == [0.0, 1.0, 1.0, 0.0]

    def test_straight_through_gradient_follows_soft_mask(self):
        noise = sample_gumbel((4,), torch.Generator().manual_seed(2), dtype=torch.float64)
        weights = torch.tensor([0.3, -1.0, 2.0, 0.5], dtype=torch.float64)
        hard_input = torch.tensor([0.4, 0.1, 0.7, 0.2], dtype=torch.float64, requires_grad=True)
        soft_input = hard_input.detach().clone().requires_grad_(True)
        (gumbel_softmax(hard_input, hard=True, noise=noise) * weights).sum().backward()
        (gumbel_softmax(soft_input, hard=False, noise=noise) * weights).sum().backward()
        assert torch.allclose(hard_input.grad, soft_input.grad)

    def test_soft_gradient_matches_finite_differences(self):
        noise = sample_gumbel((2, 4), torch.Generator().manual_seed(3), dtype=torch.float64)
        energies = torch.rand(2, 4, dtype=torch.float64).requires_grad_(True)
        error = oracles.finite_difference_error(
            lambda e: gumbel_softmax(e, tau=1.0, hard=False, noise=noise), [energies]
        )
        assert error < 1e-6

    def test_seeded_noise_is_reproducible(self):
        energies = torch.rand(8, 4)
        first = gumbel_softmax(energies, generator=torch.Generator().manual_seed(7))
        second = gumbel_softmax(energies, generator=torch.Generator().manual_seed(7))
        assert torch.equal(first, second)

    def test_rejects_non_positive_temperature(self):
        with pytest.raises(ValidationError):
            gumbel_softmax(torch.ones(4), tau=0.0)


class TestFlattening:
    def test_degenerate_windows_coincide(self):
        feature = torch.rand(1, 2, 2, 3)
        coarse = flatten_windows(feature, coarse_layout(2, 2))
        fine = flatten_windows(feature, fine_layout(2, 2))
        assert torch.equal(coarse.provenance, fine.provenance)
        assert torch.equal(coarse.tokens, fine.tokens)

    def test_coarse_top_left_window(self):
        sequence = flatten_windows(torch.rand(1, 4, 4, 1), coarse_layout(4, 4))
        assert sequence.provenance[0, :4].tolist() == [0, 1, 4, 5]

    def test_fine_order_is_nested_in_coarse_slots(self):
        order = fine_layout(8, 8).order()
        assert order[:8].tolist() == [0, 1, 8, 9, 2, 3, 10, 11]
        coarse = coarse_layout(8, 8).order()
        for slot in range(4):
            window = slice(16 * slot, 16 * (slot + 1))
            assert set(order[window].tolist()) == set(coarse[window].tolist())

    def test_local_scan_order(self):
        assert local_scan_order(coarse_layout(4, 4)).tolist() == [
            0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15,
        ]
        assert local_scan_order(WindowLayout(4, 4, 1)).tolist() == list(range(16))

    @pytest.mark.parametrize("side", [2, 4, 6, 8, 12])
    def test_orders_are_permutations(self, side):
        for grid in (1, 2, 4):
            assert is_permutation(WindowLayout(side, side, grid).order(), side * side)

    def test_non_divisible_fine_layout_falls_back_to_coarse(self):
        layout = fine_layout(6, 6)
        assert not layout.fine_divisible
        assert torch.equal(layout.order(), coarse_layout(6, 6).order())
        assert window_segments(layout) == window_segments(coarse_layout(6, 6))

    def test_odd_side_rejected(self):
        with pytest.raises(PartitionLayoutError):
            coarse_layout(5, 4)


class TestComposeAndInverse:
    def test_upsample_mask(self):
        mask = upsample_mask(torch.tensor([1.0, 0.0, 0.0, 0.0]), 16)
        assert mask.tolist() == [1.0] * 4 + [0.0] * 12
        uniform = upsample_mask(torch.full((4,), 0.25), 16)
        assert torch.equal(uniform, torch.full((16,), 0.25))

    def test_upsample_matches_broadcast(self):
        mask = torch.rand(3, 4)
        expected = torch.stack([mask[:, i // 4] for i in range(16)], dim=-1)
        assert torch.equal(upsample_mask(mask, 16), expected)

    def test_zero_mask_keeps_coarse_sequence(self):
        feature = torch.rand(2, 8, 8, 3)
        coarse = flatten_windows(feature, coarse_layout(8, 8))
        fine = flatten_windows(feature, fine_layout(8, 8))
        composed = compose_sequence(coarse, fine, torch.zeros(2, 64))
        assert torch.equal(composed.tokens, coarse.tokens)
        assert torch.equal(composed.provenance, coarse.provenance)

    def test_soft_mask_blends_elementwise(self):
        feature = torch.rand(1, 8, 8, 2, dtype=torch.float64)
        coarse = flatten_windows(feature, coarse_layout(8, 8))
        fine = flatten_windows(feature, fine_layout(8, 8))
        mask = upsample_mask(torch.full((1, 4), 0.25, dtype=torch.float64), 64)
        composed = compose_sequence(coarse, fine, mask)
        expected = 0.75 * coarse.tokens + 0.25 * fine.tokens
        assert (composed.tokens - expected).abs().max() < 1e-12

    def test_blend_is_linear_in_mask(self):
        generator = torch.Generator().manual_seed(4)
        for side in (4, 8):
            feature = torch.rand(2, side, side, 3, dtype=torch.float64, generator=generator)
            coarse = flatten_windows(feature, coarse_layout(side, side))
            fine = flatten_windows(feature, fine_layout(side, side))
            for _ in range(50):
                a = torch.rand(2, side * side, dtype=torch.float64, generator=generator)
                b = torch.rand(2, side * side, dtype=torch.float64, generator=generator)
                averaged = 0.5 * (
                    compose_sequence(coarse, fine, a).tokens + compose_sequence(coarse, fine, b).tokens
                )
                midpoint = compose_sequence(coarse, fine, 0.5 * (a + b)).tokens
                assert (averaged - midpoint).abs().max() < 1e-12

    def test_hard_mask_composition_invariants(self):
        generator = torch.Generator().manual_seed(0)
        for trial in range(1000):
            side = (4, 8)[trial % 2]
            feature = torch.rand(1, side, side, 2, generator=generator)
            refined = int(torch.randint(4, (1,), generator=generator))
            window_mask = torch.zeros(1, 4)
            window_mask[0, refined] = 1.0
            composed = compose_sequence(
                flatten_windows(feature, coarse_layout(side, side)),
                flatten_windows(feature, fine_layout(side, side)),
                upsample_mask(window_mask, side * side),
            )
            assert is_permutation(composed.provenance[0], side * side)
            assert torch.equal(inverse_window_transform(composed), feature)

    @pytest.mark.parametrize("grid", [1, 2, 4])
    def test_flatten_round_trip(self, grid):
        feature = torch.rand(2, 8, 8, 3)
        sequence = flatten_windows(feature, WindowLayout(8, 8, grid))
        assert torch.equal(inverse_window_transform(sequence), feature)

    def test_inverse_rejects_non_permutation(self):
        sequence = flatten_windows(torch.rand(1, 4, 4, 1), coarse_layout(4, 4))
        sequence.provenance = torch.zeros(1, 16, dtype=torch.long)
        with pytest.raises(ValidationError):
            inverse_window_transform(sequence)


class TestSegments:
    def test_window_segments(self):
        assert window_segments(coarse_layout(8, 8)) == [(0, 16), (16, 16), (32, 16), (48, 16)]
        assert window_segments(fine_layout(8, 8)) == [(i, 4) for i in range(0, 64, 4)]

    def test_composed_segments_split_refined_slot(self):
        selected = torch.tensor([[False, True, False, False], [True, False, False, False]])
        segments = composed_segments(selected, coarse_layout(8, 8))
        assert segments[0] == [(0, 16), (16, 4), (20, 4), (24, 4), (28, 4), (32, 16), (48, 16)]
        assert segments[1][:4] == [(0, 4), (4, 4), (8, 4), (12, 4)]
        for row in segments:
            validate_segments(row, 64)

    def test_validate_segments_errors(self):
        with pytest.raises(ValidationError):
            validate_segments([(0, 4), (5, 4)], 9)
        with pytest.raises(ValidationError):
            validate_segments([(0, 4)], 8)
        with pytest.raises(ValidationError):
            validate_segments([(0, 0), (0, 4)], 4)


class TestSaliencyPartitioner:
    def test_eval_selects_highest_energy_window(self):
        saliency = torch.zeros(2, 8, 8)
        saliency[0, 6, 1] = 1.0
        saliency[1, 0, 7] = 1.0
        state = SaliencyPartitioner().state(saliency, 64, training=False)
        assert state.selected_index.tolist() == [[2], [1]]
        assert state.window_mask.tolist() == [[0.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0]]
        assert state.token_mask.shape == (2, 64)

    def test_training_noise_uses_generator(self):
        saliency = torch.rand(4, 8, 8)
        partitioner = SaliencyPartitioner(tau=1.0)
        first = partitioner.state(saliency, 64, True, torch.Generator().manual_seed(5))
        second = partitioner.state(saliency, 64, True, torch.Generator().manual_seed(5))
        assert torch.equal(first.window_mask, second.window_mask)

    def test_compose_returns_matching_segments(self):
        saliency = torch.zeros(1, 8, 8)
        saliency[0, 7, 7] = 1.0
        partitioner = SaliencyPartitioner(refine_windows=2)
        feature = torch.rand(1, 8, 8, 4)
        state = partitioner.state(saliency, 64, training=False)
        sequence, segments = partitioner.compose(feature, state)
        assert sequence.tokens.shape == (1, 64, 4)
        assert len(segments[0]) == 2 + 2 * 4
        assert torch.equal(inverse_window_transform(sequence), feature)
