"""Shared stride-8 backbone producing feature maps and landmark score maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamGroup, kaiming, zeros
from .tensor import Tensor

STRIDE = 8
PIXEL_MEAN = 0.5
HEAD_INIT_SCALE = 0.01  # near-uniform attention at init, so pooling starts as a plain mean


@dataclass
class BackboneParams(ParamGroup):
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels=(16, 32, 64), dtype=np.float32) -> "BackboneParams":
        c1, c2, c3 = channels
        return cls(
            conv1_w=kaiming(rng, (7, 7, 3, c1), 7 * 7 * 3, dtype),
            conv1_b=zeros((c1,), dtype),
            conv2_w=kaiming(rng, (3, 3, c1, c2), 9 * c1, dtype),
            conv2_b=zeros((c2,), dtype),
            conv3_w=kaiming(rng, (3, 3, c2, c3), 9 * c2, dtype),
            conv3_b=zeros((c3,), dtype),
        )

    @property
    def channels(self) -> int:
        return self.conv3_w.shape[-1]


@dataclass
class DetectParams(ParamGroup):
    backbone: BackboneParams
    head_w: Tensor
    head_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels=(16, 32, 64), k: int = 12, dtype=np.float32) -> "DetectParams":
        bb = BackboneParams.init(rng, channels, dtype)
        c = channels[-1]
        head = kaiming(rng, (1, 1, c, k), c, dtype)
        head.data *= np.asarray(HEAD_INIT_SCALE, dtype=dtype)
        return cls(bb, head, zeros((k,), dtype))

    @property
    def k(self) -> int:
        return self.head_w.shape[-1]


@dataclass
class LandmarkMaps:
    F: Tensor  # (N, h, w, C)
    A: Tensor  # (N, h, w, K)
    G: Tensor  # (N, h, w, 1)

    @property
    def scores(self) -> Tensor:
        """Local maps followed by the global map: (N, h, w, K+1)."""
        return T.concat([self.A, self.G], axis=-1)


def to_input(images, dtype=np.float32) -> Tensor:
    """Mean-subtract a stack of (N, H, W, 3) images in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise T.ShapeError(f"expected (N, H, W, 3) images, got {arr.shape}")
    return Tensor(arr.astype(dtype) - np.asarray(PIXEL_MEAN, dtype=dtype))


def backbone_forward(x: Tensor, p: BackboneParams) -> Tensor:
    """(N, H, W, 3) -> (N, H/8, W/8, C)."""
    h = T.relu(T.conv2d(x, p.conv1_w, p.conv1_b, stride=2, pad=3))
    h = T.max_pool2d(h, 3, 2, pad=1)
    h = T.relu(T.conv2d(h, p.conv2_w, p.conv2_b, stride=1, pad=1))
    return T.relu(T.conv2d(h, p.conv3_w, p.conv3_b, stride=2, pad=1))


def landmark_head(F: Tensor, params: DetectParams) -> LandmarkMaps:
    A = T.conv2d(F, params.head_w, params.head_b)
    G = T.max_reduce(A, axis=-1, keepdims=True)
    return LandmarkMaps(F, A, G)


def detect_forward(template, params: DetectParams) -> LandmarkMaps:
    """Apply the shared detector to every image of a template.

    ``template`` may be a :class:`~dcn.synth.Template`, a sequence of
    (H, W, 3) arrays, or an (N, H, W, 3) array.
    """
    if hasattr(template, "samples"):
        imgs = [s.image for s in template.samples]
    else:
        imgs = list(template) if not isinstance(template, np.ndarray) else template
    if len(imgs) == 0:
        raise ValueError("template has no images")
    sizes = {np.shape(im) for im in imgs}
    if len(sizes) != 1:
        raise ValueError(f"mixed image sizes within a template: {sorted(sizes)}")
    x = to_input(np.stack(imgs), params.head_w.dtype)
    return landmark_head(backbone_forward(x, params.backbone), params)
