"""
Tests for saliency images, partition overlays and feature-map export.
"""

import numpy as np
import pytest
import torch
from PIL import Image

from pestvl_net.models.network import PestVLNet
from pestvl_net.schemas.config import ModelConfig
from pestvl_net.services.checkpoint_service import tensors_from_bytes
from pestvl_net.services.dataset_service import load_image
from pestvl_net.services.visualization_service import (
    COARSE_COLOR,
    REFINED_COLOR,
    colorize,
    draw_partition_overlay,
    export_feature_maps,
    feature_map,
    partition_view,
    to_uint8,
    write_saliency,
)
from pestvl_net.utils.exceptions import ValidationError

pytestmark = pytest.mark.unit


def bright_corner_image(size: int = 16) -> torch.Tensor:
    image = torch.full((3, size, size), 0.1, dtype=torch.float64)
    image[:, 1:4, size - 5 : size - 2] = 0.9
    return image


class TestSaliencyOutput:
    def test_png_and_raw_dump(self, image_file, tmp_path):
        image = load_image(image_file)
        saliency = write_saliency(image, ModelConfig(), tmp_path / "sal.png", tmp_path / "sal.pvlt")
        with Image.open(tmp_path / "sal.png") as png:
            assert png.mode == "L"
            assert png.size == (32, 32)
            assert np.array_equal(np.asarray(png), to_uint8(saliency))
        raw = tensors_from_bytes((tmp_path / "sal.pvlt").read_bytes())["saliency"]
        assert torch.allclose(raw.to(torch.float64), saliency.to(torch.float64), atol=1e-7)
        assert saliency.min() >= 0 and saliency.max() <= 1

    def test_rewrite_is_byte_identical(self, image_file, tmp_path):
        image = load_image(image_file)
        write_saliency(image, ModelConfig(), tmp_path / "a.png")
        write_saliency(image, ModelConfig(), tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


class TestPartitionOverlay:
    def test_selects_salient_window(self):
        config = ModelConfig(image_size=16, stem_stride=2)
        view = partition_view(bright_corner_image(), config)
        assert view.feature_size == 8
        assert len(view.energies) == 4
        assert view.selected == [int(np.argmax(view.energies))]

    def test_overlay_colours(self, tmp_path):
        view = partition_view(bright_corner_image(), ModelConfig(image_size=16, stem_stride=2))
        path = draw_partition_overlay(bright_corner_image(), view, tmp_path / "overlay.png")
        pixels = np.asarray(Image.open(path).convert("RGB"))
        assert pixels.shape == (16, 16, 3)
        colours = {tuple(int(c) for c in p) for p in pixels.reshape(-1, 3)}
        assert REFINED_COLOR in colours
        assert COARSE_COLOR in colours


class TestFeatureMaps:
    def test_feature_map_is_normalized(self):
        feature = torch.randn(6, 6, 4)
        plane = feature_map(feature)
        assert plane.shape == (6, 6)
        assert plane.min() == 0.0 and plane.max() == 1.0

    def test_colorize_shape(self):
        assert colorize(torch.linspace(0, 1, 12).reshape(3, 4)).shape == (3, 4, 3)

    def test_export_at_full_resolution(self, tmp_path):
        torch.manual_seed(0)
        model = PestVLNet(ModelConfig(image_size=224, stage_count=1, fusion_count=0, stem_channels=8))
        paths = export_feature_maps(model, torch.rand(3, 224, 224), [0, 1], tmp_path)
        assert [p.name for p in paths] == ["stage_00.png", "stage_01.png"]
        for path in paths:
            with Image.open(path) as png:
                assert png.size == (56, 56)
                assert png.mode == "RGB"

    def test_constant_image_with_zero_parameters_gives_constant_map(self, tiny_config, tmp_path):
        model = PestVLNet(tiny_config)
        with torch.no_grad():
            for param in model.parameters():
                param.zero_()
        paths = export_feature_maps(model, torch.full((3, 16, 16), 0.5), [0, 1, 3], tmp_path)
        for path in paths:
            pixels = np.asarray(Image.open(path))
            assert (pixels == pixels[0, 0]).all()

    def test_out_of_range_stage(self, tiny_config, tmp_path):
        model = PestVLNet(tiny_config)
        with pytest.raises(ValidationError):
            export_feature_maps(model, torch.rand(3, 16, 16), [model.stage_count], tmp_path)
        assert not list(tmp_path.iterdir())
