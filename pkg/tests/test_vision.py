from __future__ import annotations

import numpy as np
import pytest
import torch
from scipy import ndimage

from puzzlevlm.vision import (
    N_REGION_FEATURES,
    PatchEncoder,
    RegionDescriptor,
    SegmentEncoder,
    VisionConfig,
    VisionEncoder,
    dominant_color,
    extract_regions,
    foreground_mask,
    fuse,
    label_components,
)

from .oracles import FOUR_CONNECTED, component_count


def _blank(size: int = 32) -> np.ndarray:
    return np.full((size, size, 3), 255, dtype=np.uint8)


def _with_block(image: np.ndarray, top: int, left: int, h: int, w: int, color) -> np.ndarray:
    image = image.copy()
    image[top : top + h, left : left + w] = color
    return image


def test_dominant_color_is_most_frequent():
    image = _blank(8)
    image[:2] = (10, 20, 30)
    np.testing.assert_array_equal(dominant_color(image), (255, 255, 255))


def test_foreground_mask_thresholds_against_background():
    image = _with_block(_blank(8), 2, 2, 2, 2, (220, 40, 40))
    image = _with_block(image, 5, 5, 1, 1, (230, 230, 230))  # deviation 25 < 32
    mask = foreground_mask(image, 32)
    assert mask.sum() == 4
    assert mask[2:4, 2:4].all()


def test_label_components_matches_scipy_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(50):
        mask = rng.random((20, 20)) < 0.35
        labels, count = label_components(mask)
        expected_labels, expected_count = ndimage.label(mask, structure=FOUR_CONNECTED)
        assert count == expected_count
        # Same partition: every library component maps onto exactly one scipy
        # component and vice versa.
        for k in range(count):
            assert len(set(expected_labels[labels == k].tolist())) == 1
        assert (labels == -1).sum() == (~mask).sum()
        assert ((labels >= 0) == mask).all()


def test_label_components_row_major_discovery_order():
    mask = np.zeros((5, 5), dtype=bool)
    mask[4, 0] = True
    mask[0, 3] = True
    mask[2, 1] = True
    labels, count = label_components(mask)
    assert count == 3
    assert labels[0, 3] == 0
    assert labels[2, 1] == 1
    assert labels[4, 0] == 2


def test_extract_regions_sorting_min_area_and_descriptor_values():
    image = _with_block(_blank(4), 1, 1, 2, 2, (220, 40, 40))
    regions = extract_regions(image, threshold=32, min_area=1)
    assert len(regions) == 1
    region = regions[0]
    assert region.area == 4
    assert region.centroid == (0.5, 0.5)
    assert region.bbox == (0.25, 0.25, 0.5, 0.5)
    np.testing.assert_allclose(region.mean_color, (220 / 255, 40 / 255, 40 / 255))
    assert len(region.feature_vector(16)) == N_REGION_FEATURES
    assert region.feature_vector(16)[0] == 4 / 16

    image = _with_block(image, 0, 0, 1, 1, (20, 20, 20))
    assert len(extract_regions(image, threshold=32, min_area=2)) == 1
    both = extract_regions(image, threshold=32, min_area=1)
    assert [r.area for r in both] == [4, 1]  # area-descending


def test_extract_regions_tie_break_is_topleft_row_major():
    image = _blank(8)
    image = _with_block(image, 5, 1, 2, 2, (220, 40, 40))
    image = _with_block(image, 1, 5, 2, 2, (40, 170, 40))
    regions = extract_regions(image, threshold=32, min_area=1)
    assert [r.area for r in regions] == [4, 4]
    assert regions[0].bbox[0] < regions[1].bbox[0]


def test_region_descriptor_validation():
    with pytest.raises(ValueError, match="area"):
        RegionDescriptor(0, (0.5, 0.5), (0.4, 0.4, 0.2, 0.2), (0.0, 0.0, 0.0))
    with pytest.raises(ValueError, match="centroid"):
        RegionDescriptor(1, (0.9, 0.9), (0.1, 0.1, 0.2, 0.2), (0.0, 0.0, 0.0))
    with pytest.raises(ValueError, match="\\[0, 1\\]"):
        RegionDescriptor(1, (0.5, 0.5), (0.4, 0.4, 0.2, 0.2), (1.5, 0.0, 0.0))


def test_vision_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        VisionConfig(image_size=30, patch_size=8)
    assert VisionConfig(image_size=32, patch_size=8).n_patches == 16


def test_patch_encoder_shapes_and_errors():
    cfg = VisionConfig()
    torch.manual_seed(0)
    encoder = PatchEncoder(cfg)
    tokens = encoder(_blank(32))
    assert tokens.shape == (cfg.n_patches, cfg.dim)
    with pytest.raises(ValueError, match="patches"):
        encoder(_blank(64))
    with pytest.raises(ValueError, match="uint8"):
        encoder(_blank(32).astype(np.float32))


def test_segment_encoder_pads_with_null_token():
    cfg = VisionConfig(n_segments=4)
    torch.manual_seed(0)
    encoder = SegmentEncoder(cfg)
    blank_tokens = encoder(_blank(32))
    assert blank_tokens.shape == (4, cfg.dim)
    for row in blank_tokens:
        assert torch.equal(row, encoder.null_token)

    image = _with_block(_blank(32), 2, 2, 4, 4, (220, 40, 40))
    regions = encoder.describe(image)
    assert len(regions) == 1
    tokens = encoder(image, regions)
    assert tokens.shape == (4, cfg.dim)
    assert not torch.equal(tokens[0], encoder.null_token)
    assert torch.equal(tokens[1], encoder.null_token)


def test_describe_caps_at_n_segments_largest_first():
    cfg = VisionConfig(n_segments=2)
    encoder = SegmentEncoder(cfg)
    image = _blank(32)
    for i, side in enumerate((6, 4, 2)):
        image = _with_block(image, 2, 2 + i * 10, side, side, (220, 40, 40))
    regions = encoder.describe(image)
    assert len(regions) == 2
    assert regions[0].area == 36 and regions[1].area == 16


def test_fuse_concatenates_patches_first():
    patches = torch.randn(4, 8)
    segments = torch.randn(3, 8)
    bundle = fuse(patches, segments)
    assert bundle.fused_tokens.shape == (7, 8)
    assert torch.equal(bundle.fused_tokens[:4], patches)
    assert torch.equal(bundle.fused_tokens[4:], segments)
    with pytest.raises(ValueError, match="column mismatch"):
        fuse(torch.randn(4, 8), torch.randn(3, 6))
    with pytest.raises(ValueError, match="non-finite"):
        fuse(torch.full((1, 4), float("nan")), torch.randn(1, 4))


def test_vision_encoder_bundle_counts_and_gradients():
    cfg = VisionConfig()
    torch.manual_seed(0)
    encoder = VisionEncoder(cfg)
    image = _with_block(_blank(32), 4, 4, 5, 5, (220, 40, 40))
    image = _with_block(image, 20, 20, 6, 6, (50, 70, 220))
    bundle = encoder(image)
    assert bundle.n_segments == component_count(foreground_mask(image, cfg.quantize_threshold))
    assert bundle.fused_tokens.shape == (cfg.n_patches + cfg.n_segments, cfg.dim)

    bundle.fused_tokens.sum().backward()
    assert encoder.patches.proj.weight.grad is not None
    assert encoder.patches.proj.weight.grad.abs().sum() > 0
    assert encoder.segments.embed.weight.grad is not None
    assert encoder.segments.embed.weight.grad.abs().sum() > 0
