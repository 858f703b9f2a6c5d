"""
Tests for vision-language fusion.
"""

import numpy as np
import pytest
import torch

from pestvl_net.models.fusion import (
    VLFBlock,
    concat_prompt,
    cross_attention,
    refine,
    refine_text,
    refine_visual,
)
from pestvl_net.utils import oracles
from pestvl_net.utils.exceptions import ShapeMismatchError

pytestmark = pytest.mark.unit


def numpy_refine(x: np.ndarray, weight: np.ndarray, scale: np.ndarray, offset: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    normed = (x - mean) / np.sqrt(var + 1e-5) * scale + offset
    return normed @ weight.T + x


class TestRefine:
    def test_zero_weight_is_residual(self):
        visual, text = torch.randn(2, 16, 8), torch.randn(2, 5, 6)
        assert torch.equal(refine_visual(visual, torch.zeros(8, 8)), visual)
        assert torch.equal(refine_text(text, torch.zeros(6, 6)), text)

    def test_matches_step_by_step_oracle(self):
        rng = np.random.default_rng(0)
        x, weight = rng.standard_normal((5, 4)), rng.standard_normal((4, 4))
        scale, offset = rng.standard_normal(4), rng.standard_normal(4)
        out = refine(*(torch.from_numpy(a) for a in (x, weight, scale, offset))).numpy()
        assert np.abs(out - numpy_refine(x, weight, scale, offset)).max() < 1e-6

    def test_shape_preserved(self):
        text = torch.randn(3, 5, 6)
        assert refine_text(text, torch.randn(6, 6)).shape == (3, 5, 6)

    def test_rejects_non_square_weight(self):
        with pytest.raises(ShapeMismatchError):
            refine_visual(torch.randn(4, 3), torch.randn(3, 4))


class TestConcatPrompt:
    def test_pooled_text_first(self):
        text, prompt = torch.randn(2, 6), torch.randn(4, 6)
        out = concat_prompt(text, prompt)
        assert out.shape == (2, 5, 6)
        assert torch.equal(out[:, 0], text)
        assert torch.equal(out[1, 1:], prompt)

    def test_empty_prompt(self):
        text = torch.randn(3, 6)
        assert torch.equal(concat_prompt(text, torch.zeros(0, 6)), text.unsqueeze(1))

    def test_token_sequence_input(self):
        text, prompt = torch.randn(2, 3, 4), torch.randn(2, 4)
        out = concat_prompt(text, prompt)
        assert torch.equal(out, torch.cat([text, prompt.expand(2, -1, -1)], dim=1))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            concat_prompt(torch.randn(2, 6), torch.randn(4, 5))


class TestCrossAttention:
    def test_single_key_returns_its_value(self):
        visual, text = torch.randn(1, 7, 4), torch.randn(1, 1, 3)
        w_q, w_k, w_v = torch.randn(2, 4), torch.randn(2, 3), torch.randn(4, 3)
        out = cross_attention(visual, text, w_q, w_k, w_v)
        expected = (text[0] @ w_v.T).expand(7, 4)
        assert torch.allclose(out[0], expected, atol=1e-6)

    def test_identical_keys_average_values(self):
        visual = torch.randn(1, 3, 4, dtype=torch.float64)
        text = torch.randn(1, 5, 3, dtype=torch.float64)
        w_k = torch.zeros(2, 3, dtype=torch.float64)
        w_v = torch.randn(4, 3, dtype=torch.float64)
        out = cross_attention(visual, text, torch.randn(2, 4, dtype=torch.float64), w_k, w_v)
        mean_value = (text[0] @ w_v.T).mean(dim=0)
        assert torch.allclose(out[0], mean_value.expand(3, 4))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        visual, text = rng.standard_normal((1, 4, 6)), rng.standard_normal((1, 3, 5))
        w_q, w_k, w_v = rng.standard_normal((4, 6)), rng.standard_normal((4, 5)), rng.standard_normal((6, 5))
        out = cross_attention(*(torch.from_numpy(a) for a in (visual, text, w_q, w_k, w_v)))
        expected = oracles.naive_attention(visual[0] @ w_q.T, text[0] @ w_k.T, text[0] @ w_v.T, scale=2.0)
        assert np.abs(out[0].numpy() - expected).max() < 1e-6

    def test_weights_are_row_stochastic(self):
        visual, text = torch.randn(3, 10, 8) * 10, torch.randn(3, 5, 6) * 10
        out, weights = cross_attention(
            visual, text, torch.randn(4, 8), torch.randn(4, 6), torch.randn(8, 6), return_weights=True
        )
        assert weights.shape == (3, 10, 5)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(3, 10), atol=1e-6)

    def test_output_within_value_hull(self):
        visual, text = torch.randn(2, 9, 4), torch.randn(2, 3, 5)
        w_v = torch.randn(4, 5)
        out = cross_attention(visual, text, torch.randn(3, 4), torch.randn(3, 5), w_v)
        values = text @ w_v.T
        assert (out >= values.min(dim=1, keepdim=True).values - 1e-5).all()
        assert (out <= values.max(dim=1, keepdim=True).values + 1e-5).all()

    def test_positive_query_scaling_keeps_argmax(self):
        visual, text = torch.randn(1, 6, 4), torch.randn(1, 5, 4)
        w_q, w_k, w_v = torch.randn(4, 4), torch.randn(4, 4), torch.randn(4, 4)
        _, base = cross_attention(visual, text, w_q, w_k, w_v, return_weights=True)
        _, scaled = cross_attention(visual, text, 3.0 * w_q, w_k, w_v, return_weights=True)
        assert torch.equal(base.argmax(dim=-1), scaled.argmax(dim=-1))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cross_attention(torch.randn(1, 2, 4), torch.randn(1, 2, 3), torch.randn(2, 4), torch.randn(3, 3), torch.randn(4, 3))


class TestVLFBlock:
    def test_shape_contract(self):
        for channels, dim, prompts in ((8, 6, 4), (16, 16, 0), (4, 10, 1)):
            block = VLFBlock(channels, dim, prompt_tokens=prompts, ffn_ratio=2)
            assert block(torch.randn(2, 9, channels), torch.randn(2, dim)).shape == (2, 9, channels)

    def test_zero_ffn_returns_fused_feature(self):
        block = VLFBlock(8, 6, prompt_tokens=2).double()
        with torch.no_grad():
            for param in block.ffn.parameters():
                param.zero_()
        visual = torch.randn(2, 4, 8, dtype=torch.float64)
        text = torch.randn(2, 6, dtype=torch.float64)
        refined = refine_visual(visual, block.visual_proj.weight, block.visual_norm.weight, block.visual_norm.bias)
        text_tokens = refine_text(
            concat_prompt(text, block.prompt), block.text_proj.weight, block.text_norm.weight, block.text_norm.bias
        )
        fused = refined + cross_attention(
            refined, text_tokens, block.query.weight, block.key.weight, block.value.weight
        )
        assert torch.allclose(block(visual, text), fused)

    def test_zero_projections_reduce_to_identity(self):
        block = VLFBlock(8, 6)
        with torch.no_grad():
            for param in block.parameters():
                param.zero_()
        visual = torch.randn(3, 5, 8)
        assert torch.equal(block(visual, torch.randn(3, 6)), visual)

    def test_prompt_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        block = VLFBlock(4, 3, prompt_tokens=2, ffn_ratio=2).double()
        with torch.no_grad():
            block.prompt.normal_()
        visual = torch.randn(2, 5, 4, dtype=torch.float64)
        text = torch.randn(2, 3, dtype=torch.float64)
        block(visual, text).sum().backward()
        assert block.prompt.grad.abs().max() > 0
        error = oracles.finite_difference_error(lambda _: block(visual, text), [block.prompt])
        assert error < 1e-3

    def test_text_batch_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            VLFBlock(4, 3)(torch.randn(2, 5, 4), torch.randn(3, 3))
