"""
Tests for the assembled PestVL-Net.
"""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from pestvl_net.models import rwkv
from pestvl_net.models.network import ConvStem, PestVLNet
from pestvl_net.schemas.config import AblationConfig, ModelConfig
from pestvl_net.services.training_service import MomentumSGD
from pestvl_net.utils import oracles
from pestvl_net.utils.exceptions import ShapeMismatchError, ValidationError

pytestmark = pytest.mark.unit

_erf = np.vectorize(math.erf)


def numpy_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def numpy_group_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Single-group norm of a ``(C, H, W)`` map."""
    normed = (x - x.mean()) / np.sqrt(x.var() + eps)
    return normed * weight[:, None, None] + bias[:, None, None]


def with_ablation(config: ModelConfig, **flags) -> ModelConfig:
    return config.model_copy(update={"ablation": AblationConfig(**flags)})


class TestConvStem:
    def test_full_size_shape(self):
        stem = ConvStem(3, 64, stride=4)
        assert stem(torch.rand(1, 3, 224, 224)).shape == (1, 64, 56, 56)

    @pytest.mark.parametrize("stride,side", [(4, 8), (2, 16)])
    def test_toy_shape(self, stride, side):
        assert ConvStem(3, 16, stride)(torch.rand(2, 3, 32, 32)).shape == (2, 16, side, side)

    def test_matches_convolution_oracle(self):
        torch.manual_seed(0)
        stem = ConvStem(3, 4, stride=4).double()
        with torch.no_grad():
            for norm in (stem.norm1, stem.norm2):
                norm.weight.normal_()
                norm.bias.normal_()
        image = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        out = stem(image)[0].detach().numpy()

        param = lambda p: p.detach().numpy()
        x = oracles.naive_conv2d(image[0].numpy(), param(stem.conv1.weight), stride=2, padding=1)
        x = numpy_gelu(numpy_group_norm(x, param(stem.norm1.weight), param(stem.norm1.bias)))
        x = oracles.naive_conv2d(x, param(stem.conv2.weight), stride=2, padding=1)
        expected = numpy_gelu(numpy_group_norm(x, param(stem.norm2.weight), param(stem.norm2.bias)))
        assert np.abs(out - expected).max() < 1e-5


class TestPestVLNet:
    def test_logits_shape(self, tiny_config):
        model = PestVLNet(tiny_config)
        logits = model(torch.rand(3, 3, 16, 16), torch.randn(3, 8))
        assert logits.shape == (3, 2)
        assert torch.isfinite(logits).all()

    def test_stage_features(self, tiny_config):
        model = PestVLNet(tiny_config).eval()
        features = model.stage_features(torch.rand(2, 3, 16, 16), torch.randn(2, 8))
        assert len(features) == model.stage_count == 1 + 2 + 1
        assert all(f.shape == (2, 8, 8, 8) for f in features)

    def test_partition_states_recorded(self, tiny_config):
        model = PestVLNet(tiny_config).eval()
        model(torch.rand(2, 3, 16, 16), torch.randn(2, 8))
        states = model.partition_states()
        assert len(states) == 2
        assert all(state is not None and state.selected_index.shape == (2, 1) for state in states)

    def test_conv_only_backbone(self, tiny_config):
        model = PestVLNet(with_ablation(tiny_config, conv_only_backbone=True))
        logits = model(torch.rand(2, 3, 16, 16), torch.randn(2, 8))
        assert logits.shape == (2, 2)
        assert model.partition_states() == [None, None]

    def test_disable_partition(self, tiny_config):
        model = PestVLNet(with_ablation(tiny_config, disable_partition=True))
        model(torch.rand(2, 3, 16, 16), torch.randn(2, 8))
        assert model.partition_states() == [None, None]

    def test_disable_partition_changes_only_the_scan_order(self, tiny_config, monkeypatch):
        torch.manual_seed(0)
        full = PestVLNet(tiny_config).eval()
        with torch.no_grad():
            for param in full.parameters():
                param.add_(torch.randn_like(param) * 0.1)
        ablated = PestVLNet(with_ablation(tiny_config, disable_partition=True)).eval()
        ablated.load_state_dict(full.state_dict())

        calls = []
        kernel = rwkv.ga_wkv

        def recording_ga_wkv(k, v, w, u, segments, dense_max_len=256):
            calls.append([list(row) for row in segments])
            return kernel(k, v, w, u, segments, dense_max_len)

        monkeypatch.setattr(rwkv, "ga_wkv", recording_ga_wkv)
        channel_calls = []
        hooks = [
            block.channel.register_forward_hook(lambda module, args, out: channel_calls.append((args, out)))
            for block in full.blocks
        ]

        images, text = torch.rand(2, 3, 16, 16), torch.randn(2, 8)
        with torch.no_grad():
            full_features = full.stage_features(images, text)
            full_calls = list(calls)
            calls.clear()
            ablated_features = ablated.stage_features(images, text)
        for hook in hooks:
            hook.remove()

        assert calls == [[[(0, 64)], [(0, 64)]]] * 2
        assert all(row != [(0, 64)] for call in full_calls for row in call)
        assert torch.equal(ablated_features[0], full_features[0])
        assert not torch.allclose(ablated_features[1], full_features[1])

        with torch.no_grad():
            sequence, segments, state = ablated.blocks[0].spatial.sequence(
                full_features[0], full.stage_saliency(images)
            )
            assert torch.equal(sequence.provenance, torch.arange(64).expand(2, -1))
            assert segments == [[(0, 64)]] * 2 and state is None

            for block, (args, out) in zip(ablated.blocks, channel_calls):
                assert torch.equal(block.channel(*args), out)
            tokens = full_features[-2].reshape(2, 64, 8)
            assert torch.equal(ablated.fusion[0](tokens, text), full.fusion[0](tokens, text))
            pooled = full_features[-1].mean(dim=(1, 2))
            assert torch.equal(
                ablated.head(ablated.head_norm(pooled)), full.head(full.head_norm(pooled))
            )

    def test_disable_fusion_ignores_captions(self, tiny_config):
        model = PestVLNet(with_ablation(tiny_config, disable_fusion=True)).eval()
        assert not model.uses_text
        images, text = torch.rand(4, 3, 16, 16), torch.randn(4, 8)
        with torch.no_grad():
            assert torch.equal(model(images, text), model(images, text[[2, 0, 3, 1]]))
            assert torch.equal(model(images, text), model(images))

    def test_captions_change_fused_logits(self, tiny_config):
        model = PestVLNet(tiny_config).eval()
        images = torch.rand(2, 3, 16, 16)
        with torch.no_grad():
            assert not torch.equal(model(images, torch.randn(2, 8)), model(images, torch.randn(2, 8)))

    def test_disable_prompt_has_no_prompt_tokens(self, tiny_config):
        model = PestVLNet(with_ablation(tiny_config, disable_prompt=True))
        assert model.fusion[0].prompt.shape == (0, 8)
        assert model(torch.rand(1, 3, 16, 16), torch.randn(1, 8)).shape == (1, 2)

    def test_input_validation(self, tiny_config):
        model = PestVLNet(tiny_config)
        with pytest.raises(ValidationError):
            model(torch.rand(1, 3, 16, 16))
        with pytest.raises(ShapeMismatchError):
            model(torch.rand(1, 3, 32, 32), torch.randn(1, 8))
        with pytest.raises(ShapeMismatchError):
            model(torch.rand(1, 3, 16, 16), torch.randn(1, 5))

    @pytest.mark.slow
    def test_sampled_parameter_gradients_match_finite_differences(self, toy_config):
        torch.manual_seed(0)
        model = PestVLNet(toy_config).double().eval()
        images = torch.rand(2, 3, 32, 32, dtype=torch.float64)
        text = torch.randn(2, toy_config.embedding_dim, dtype=torch.float64)
        labels = torch.tensor([1, 5])

        def loss() -> torch.Tensor:
            return F.cross_entropy(model(images, text), labels)

        params = [p for p in model.parameters() if p.requires_grad]
        with torch.no_grad():
            for p in params:
                p.add_(torch.randn_like(p) * 0.05)
        model.zero_grad()
        loss().backward()

        generator = torch.Generator().manual_seed(1)
        h, worst, checked = 1e-6, 0.0, 0
        for p in params:
            flat, grad = p.data.reshape(-1), p.grad.reshape(-1)
            count = max(1, flat.numel() // 100)
            for i in torch.randperm(flat.numel(), generator=generator)[:count].tolist():
                original = float(flat[i])
                with torch.no_grad():
                    flat[i] = original + h
                    plus = float(loss())
                    flat[i] = original - h
                    minus = float(loss())
                    flat[i] = original
                numeric = (plus - minus) / (2 * h)
                worst = max(worst, abs(numeric - float(grad[i])) / max(1.0, abs(numeric)))
                checked += 1
        assert checked > 0
        assert worst < 1e-3

    @pytest.mark.slow
    def test_small_lr_full_batch_loss_is_non_increasing(self, toy_config):
        torch.manual_seed(0)
        model = PestVLNet(toy_config).double().eval()
        images = torch.rand(8, 3, 32, 32, dtype=torch.float64)
        text = torch.randn(8, toy_config.embedding_dim, dtype=torch.float64)
        labels = torch.arange(8)
        optimizer = MomentumSGD(model.parameters(), lr=1e-3)
        losses = []
        for _ in range(50):
            loss = F.cross_entropy(model(images, text), labels)
            losses.append(float(loss))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        assert all(later <= earlier + 1e-6 for earlier, later in zip(losses, losses[1:]))
