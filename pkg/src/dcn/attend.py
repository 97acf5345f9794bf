"""Template-level recalibration of landmark maps and attentional pooling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class DescriptorSet:
    """K+1 pooled descriptors; row K is the global one."""

    vectors: Tensor  # (K+1, C)

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise T.ShapeError(f"descriptor set must be 2-d, got {self.vectors.shape}")

    @property
    def k(self) -> int:
        return self.vectors.shape[0] - 1

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def normalized(self) -> Tensor:
        return T.l2_normalize(self.vectors, axis=-1)


def recalibrate(maps: Tensor) -> Tensor:
    """Softmax each channel jointly over all images and cells of a template.

    Accepts (N, h, w, K+1) or a batch of templates (T, N, h, w, K+1).
    """
    if maps.ndim < 4:
        raise T.ShapeError(f"recalibrate expects (..., N, h, w, K+1), got {maps.shape}")
    return T.softmax_over(maps, (-4, -3, -2))


def self_normalize(A: Tensor) -> Tensor:
    """Per-image spatial softmax of each channel."""
    if A.ndim < 3:
        raise T.ShapeError(f"self_normalize expects (..., h, w, K), got {A.shape}")
    return T.softmax_over(A, (-3, -2))


def attend_pool(F: Tensor, A_norm: Tensor) -> DescriptorSet | Tensor:
    """Row k = sum over n, i, j of F[n, i, j] * A_norm[n, i, j, k].

    A single template (4-d inputs) yields a :class:`DescriptorSet`; batched
    5-d inputs yield the raw (T, K+1, C) tensor.
    """
    if F.shape[:-1] != A_norm.shape[:-1]:
        raise T.ShapeError(f"feature maps {F.shape} and attention maps {A_norm.shape} disagree")
    pooled = T.weighted_sum_pool(F, A_norm)
    return DescriptorSet(pooled) if F.ndim == 4 else pooled


def describe(maps) -> DescriptorSet:
    """Recalibrate and pool a template's :class:`~dcn.detect.LandmarkMaps`."""
    return attend_pool(maps.F, recalibrate(maps.scores))


# --------------------------------------------------------------------------
# attention overlays
# --------------------------------------------------------------------------


def _heat_rgb(h: np.ndarray) -> np.ndarray:
    return np.stack([np.clip(3 * h, 0, 1), np.clip(3 * h - 1, 0, 1), np.clip(3 * h - 2, 0, 1)], axis=-1)


def attention_overlays(image: np.ndarray, maps: np.ndarray, alpha: float = 0.5) -> list:
    """8-bit overlays, one per channel of ``maps`` (h, w, K+1).

    Each channel is spatially self-normalized, scaled to its max, upsampled
    to the image size by nearest neighbour and alpha-blended over ``image``.
    """
    H, W = image.shape[:2]
    h, w, kk = maps.shape
    z = maps - maps.max(axis=(0, 1), keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=(0, 1), keepdims=True)
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    out = []
    for k in range(kk):
        heat = p[:, :, k] / max(p[:, :, k].max(), 1e-12)
        up = heat[rows][:, cols]
        blend = (1 - alpha) * image[..., :3] + alpha * _heat_rgb(up)
        out.append(np.round(np.clip(blend, 0, 1) * 255).astype(np.uint8))
    return out


def save_overlays(images: np.ndarray, maps: np.ndarray, out_dir, prefix: str = "img") -> list:
    """Write K+1 PNG overlays per image; returns the written paths."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for n in range(images.shape[0]):
        for k, ov in enumerate(attention_overlays(images[n], maps[n])):
            tag = "global" if k == maps.shape[-1] - 1 else f"lm{k:02d}"
            path = out / f"{prefix}{n:02d}_{tag}.png"
            Image.fromarray(ov, "RGB").save(path)
            paths.append(path)
    return paths
