"""Occlusion-based critical-factor maps and localization scoring.

A patch slides over the image; each position is replaced with a baseline
value (the standardized train mean, i.e. 0) and the drop in the target
class probability is recorded. Per-pixel drops are averaged by how many
patches covered the pixel and normalized to [0, 1]. Only probability
drops count: the map marks evidence supporting the decision, not evidence
against it.
"""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .tensor import Tensor

__all__ = [
    "CriticalFactorMap",
    "occlusion_map",
    "critical_regions",
    "localization_score",
    "overlay_image",
    "save_map_pgm",
]


class CriticalFactorMap:
    """Normalized (H, W) importance grid plus the probe settings behind it."""

    def __init__(self, grid, patch, stride, baseline, target_class):
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 2:
            raise ShapeError(f"importance grid must be 2-D, got shape {grid.shape}")
        if grid.min() < 0.0 or grid.max() > 1.0:
            raise ShapeError("importance grid values must lie in [0, 1]")
        self.grid = grid
        self.patch = patch
        self.stride = stride
        self.baseline = baseline
        self.target_class = target_class

    @property
    def shape(self):
        return self.grid.shape


def _probe_positions(extent, patch, stride):
    pos = list(range(0, extent - patch + 1, stride))
    if pos[-1] != extent - patch:
        pos.append(extent - patch)  # tail patch so border pixels are covered
    return pos


def occlusion_map(graph, image, target_class=1, patch=16, stride=8, baseline=0.0,
                  batch_size=32):
    """Slide a baseline patch over one (1,1,H,W) image; map the prob drops."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=np.float64))
    if image.shape[0] != 1:
        raise ShapeError(f"occlusion_map takes a single image, got batch {image.shape[0]}")
    h, w = image.shape[2], image.shape[3]
    if patch < 1 or patch > h or patch > w:
        raise ConfigError(f"patch {patch} must lie in [1, min(H,W)={min(h, w)}]")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if not 0 <= target_class < graph.class_count:
        raise ConfigError(f"target_class {target_class} out of range for {graph.class_count}-way head")

    def probs(batch):
        z = graph.forward_logits(Tensor(batch))
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=1, keepdims=True))[:, target_class]

    p_orig = float(probs(image.data)[0])
    positions = [(i, j) for i in _probe_positions(h, patch, stride)
                 for j in _probe_positions(w, patch, stride)]

    drop_sum = np.zeros((h, w))
    cover = np.zeros((h, w))
    for b0 in range(0, len(positions), batch_size):
        chunk = positions[b0 : b0 + batch_size]
        batch = np.repeat(image.data, len(chunk), axis=0)
        for q, (i, j) in enumerate(chunk):
            batch[q, :, i : i + patch, j : j + patch] = baseline
        drops = np.maximum(0.0, p_orig - probs(batch))
        for q, (i, j) in enumerate(chunk):
            drop_sum[i : i + patch, j : j + patch] += drops[q]
            cover[i : i + patch, j : j + patch] += 1.0
    grid = np.divide(drop_sum, cover, out=np.zeros_like(drop_sum), where=cover > 0)
    peak = grid.max()
    if peak > 0:
        grid /= peak
    return CriticalFactorMap(grid, patch, stride, baseline, target_class)


def critical_regions(cf_map, quantile=0.85):
    """Pixels at or above the given quantile of the nonzero importance values."""
    if not 0.0 < quantile < 1.0:
        raise ConfigError(f"quantile must lie in (0,1), got {quantile}")
    grid = cf_map.grid
    nonzero = grid[grid > 0]
    if nonzero.size == 0:
        return np.zeros(grid.shape, dtype=bool)
    return grid >= np.quantile(nonzero, quantile)


def localization_score(cf_map, truth_mask):
    """Fraction of importance mass inside the dilated ground-truth mask.

    The mask is dilated by half the probe patch (square footprint) to
    compensate for occlusion blur. An all-zero map scores 0.
    """
    truth = np.asarray(truth_mask, dtype=bool)
    if truth.shape != cf_map.grid.shape:
        raise ShapeError(f"mask shape {truth.shape} != map shape {cf_map.grid.shape}")
    total = cf_map.grid.sum()
    if total <= 0:
        return 0.0
    radius = cf_map.patch // 2
    if radius > 0 and truth.any():
        footprint = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
        truth = ndimage.binary_dilation(truth, structure=footprint)
    return float(cf_map.grid[truth].sum() / total)


def dilated_truth(cf_map, truth_mask):
    """The dilated mask used by localization_score (for area accounting)."""
    truth = np.asarray(truth_mask, dtype=bool)
    radius = cf_map.patch // 2
    if radius > 0 and truth.any():
        footprint = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
        truth = ndimage.binary_dilation(truth, structure=footprint)
    return truth


def overlay_image(image, cf_map, out_path, max_blend=255):
    """8-bit RGB PNG: grayscale base, importance blended into the red channel.

    image is the raw (H, W) grayscale in [0, 1]. At map value 1 the red
    channel reaches max_blend exactly; at 0 the pixel stays gray.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"overlay expects a 2-D grayscale image, got {img.shape}")
    if img.shape != cf_map.grid.shape:
        raise ShapeError(f"image shape {img.shape} != map shape {cf_map.grid.shape}")
    if not 0 <= max_blend <= 255:
        raise ConfigError(f"max_blend must lie in [0,255], got {max_blend}")
    gray = np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8)
    red = np.clip(gray + cf_map.grid * (float(max_blend) - gray) + 0.5, 0, 255).astype(np.uint8)
    rgb = np.stack([red, gray, gray], axis=-1)
    Image.fromarray(rgb, mode="RGB").save(out_path, format="PNG")


def save_map_pgm(cf_map, out_path):
    """Importance grid as an 8-bit PGM (0..255)."""
    arr = np.clip(cf_map.grid * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(out_path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
