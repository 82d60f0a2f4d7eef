"""Dual-stream visual encoding: patch tokens plus object-level segment tokens.

The patch stream is a small learned linear patch embedding with additive
position embeddings. The segment stream is a deterministic connected-component
analysis (a desk-scale stand-in for a segmentation backbone): foreground
pixels are found by thresholding against the dominant background color,
4-connected components become RegionDescriptors, and each descriptor is
mapped through a learned embedding. The two streams are fused by row
concatenation, patch tokens first.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class VisionConfig:
    image_size: int = 32
    patch_size: int = 8
    n_segments: int = 8
    dim: int = 32
    quantize_threshold: int = 32
    min_area: int = 2

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if not 0 < self.quantize_threshold < 256:
            raise ValueError("quantize_threshold must be in (0, 256)")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class RegionDescriptor:
    """Pooled features of one connected foreground component.

    `centroid` uses pixel centers, i.e. row (mean_i + 0.5)/H, so translating a
    region by whole pixels shifts the centroid by exactly the normalized
    offset. `bbox` is (top, left, height, width), all normalized to [0, 1].
    """

    area: int
    centroid: tuple[float, float]
    bbox: tuple[float, float, float, float]
    mean_color: tuple[float, float, float]

    def __post_init__(self) -> None:
        if self.area < 1:
            raise ValueError("region area must be >= 1")
        top, left, height, width = self.bbox
        row, col = self.centroid
        if not (top <= row <= top + height and left <= col <= left + width):
            raise ValueError("bbox must contain centroid")
        for value in (*self.centroid, *self.bbox, *self.mean_color):
            if not 0.0 <= value <= 1.0:
                raise ValueError("normalized descriptor fields must lie in [0, 1]")

    def feature_vector(self, image_area: int) -> list[float]:
        return [
            self.area / image_area,
            *self.centroid,
            *self.bbox,
            *self.mean_color,
        ]


N_REGION_FEATURES = 10


def _check_image(image: np.ndarray) -> np.ndarray:
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be an H x W x 3 array")
    if image.dtype != np.uint8:
        raise ValueError("image must have dtype uint8")
    return image


def dominant_color(image: np.ndarray) -> np.ndarray:
    """Most frequent pixel value, used as the background reference."""
    flat = _check_image(image).reshape(-1, 3)
    colors, counts = np.unique(flat, axis=0, return_counts=True)
    return colors[int(np.argmax(counts))]


def foreground_mask(image: np.ndarray, threshold: int) -> np.ndarray:
    """Boolean mask of pixels whose max channel deviation from the dominant
    background color exceeds `threshold`."""
    background = dominant_color(image).astype(np.int16)
    deviation = np.abs(image.astype(np.int16) - background).max(axis=2)
    return deviation > threshold

def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connectivity flood fill. Returns (labels, count); background is -1,
    components are numbered 0.. in row-major discovery order."""
    height, width = mask.shape
    labels = np.full((height, width), -1, dtype=np.int32)
    count = 0
    for si in range(height):
        for sj in range(width):
            if not mask[si, sj] or labels[si, sj] != -1:
                continue
            queue = deque([(si, sj)])
            labels[si, sj] = count
            while queue:
                i, j = queue.popleft()
                for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                    if 0 <= ni < height and 0 <= nj < width:
                        if mask[ni, nj] and labels[ni, nj] == -1:
                            labels[ni, nj] = count
                            queue.append((ni, nj))
            count += 1
    return labels, count


def _descriptor_from_pixels(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> RegionDescriptor:
    height, width = image.shape[:2]
    area = int(rows.size)
    i0, i1 = int(rows.min()), int(rows.max())
    j0, j1 = int(cols.min()), int(cols.max())
    color = image[rows, cols].astype(np.float64).mean(axis=0) / 255.0
    return RegionDescriptor(
        area=area,
        centroid=((rows.mean() + 0.5) / height, (cols.mean() + 0.5) / width),
        bbox=(i0 / height, j0 / width, (i1 - i0 + 1) / height, (j1 - j0 + 1) / width),
        mean_color=(float(color[0]), float(color[1]), float(color[2])),
    )


def extract_regions(
    image: np.ndarray, threshold: int = 32, min_area: int = 2
) -> list[RegionDescriptor]:
    """All foreground components of at least `min_area` pixels, sorted by area
    descending with ties broken by bbox top-left corner, row-major."""
    _check_image(image)
    labels, count = label_components(foreground_mask(image, threshold))
    regions: list[RegionDescriptor] = []
    for k in range(count):
        rows, cols = np.nonzero(labels == k)
        if rows.size >= min_area:
            regions.append(_descriptor_from_pixels(image, rows, cols))
    regions.sort(key=lambda r: (-r.area, r.bbox[0], r.bbox[1]))
    return regions


@dataclass
class VisualFeatureBundle:
    patch_tokens: torch.Tensor
    segment_tokens: torch.Tensor
    fused_tokens: torch.Tensor
    n_segments: int


class PatchEncoder(nn.Module):
    """Non-overlapping patches through a learned linear map plus a learned
    per-position embedding."""

    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        in_features = cfg.patch_size * cfg.patch_size * 3
        self.proj = nn.Linear(in_features, cfg.dim)
        self.pos = nn.Parameter(torch.randn(cfg.n_patches, cfg.dim) * 0.02)

    def forward(self, image: np.ndarray) -> torch.Tensor:
        _check_image(image)
        height, width = image.shape[:2]
        p = self.cfg.patch_size
        if height % p or width % p:
            raise ValueError(f"image {height}x{width} not divisible by patch size {p}")
        n_patches = (height // p) * (width // p)
        if n_patches != self.cfg.n_patches:
            raise ValueError(
                f"image yields {n_patches} patches but encoder expects {self.cfg.n_patches}"
            )
        dtype = self.proj.weight.dtype
        x = torch.from_numpy(image.astype(np.float32)).to(dtype) / 255.0
        x = x.reshape(height // p, p, width // p, p, 3)
        x = x.permute(0, 2, 1, 3, 4).reshape(n_patches, p * p * 3)
        return self.proj(x) + self.pos


class SegmentEncoder(nn.Module):
    """RegionDescriptors through a learned embedding, padded with a learned
    null-region token up to exactly n_segments rows."""

    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(N_REGION_FEATURES, cfg.dim)
        self.null_token = nn.Parameter(torch.randn(cfg.dim) * 0.02)

    def describe(self, image: np.ndarray) -> list[RegionDescriptor]:
        regions = extract_regions(image, self.cfg.quantize_threshold, self.cfg.min_area)
        return regions[: self.cfg.n_segments]

    def forward(
        self, image: np.ndarray, regions: list[RegionDescriptor] | None = None
    ) -> torch.Tensor:
        if regions is None:
            regions = self.describe(image)
        dtype = self.embed.weight.dtype
        n_s = self.cfg.n_segments
        if regions:
            image_area = image.shape[0] * image.shape[1]
            features = torch.tensor(
                [r.feature_vector(image_area) for r in regions], dtype=dtype
            )
            tokens = self.embed(features)
        else:
            tokens = torch.zeros(0, self.cfg.dim, dtype=dtype)
        if len(regions) < n_s:
            pad = self.null_token.unsqueeze(0).expand(n_s - len(regions), -1)
            tokens = torch.cat([tokens, pad.to(dtype)], dim=0)
        return tokens


def fuse(patch_tokens: torch.Tensor, segment_tokens: torch.Tensor) -> VisualFeatureBundle:
    """Row-wise concatenation, patch tokens first."""
    if patch_tokens.shape[1] != segment_tokens.shape[1]:
        raise ValueError(
            f"column mismatch: patches d={patch_tokens.shape[1]}, "
            f"segments d={segment_tokens.shape[1]}"
        )
    fused = torch.cat([patch_tokens, segment_tokens], dim=0)
    if not torch.isfinite(fused).all():
        raise ValueError("non-finite visual tokens")
    return VisualFeatureBundle(patch_tokens, segment_tokens, fused, segment_tokens.shape[0])


class VisionEncoder(nn.Module):
    """Both streams plus fusion; `n_segments` in the returned bundle is the
    count of non-null segment rows."""

    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        self.patches = PatchEncoder(cfg)
        self.segments = SegmentEncoder(cfg)

    def forward(self, image: np.ndarray) -> VisualFeatureBundle:
        patch_tokens = self.patches(image)
        regions = self.segments.describe(image)
        segment_tokens = self.segments(image, regions)
        bundle = fuse(patch_tokens, segment_tokens)
        bundle.n_segments = len(regions)
        return bundle
