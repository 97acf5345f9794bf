"""Landmark-tagged local experts comparing two descriptor sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attend import DescriptorSet
from .params import ParamGroup, kaiming, zeros
from .tensor import Tensor

DIFFERENT, SAME = 0, 1


@dataclass
class ExpertParams(ParamGroup):
    expert_w: Tensor  # (2C + K + 1, E)
    expert_b: Tensor
    cls_w: Tensor  # (E, 2)
    cls_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, k: int, e: int = 256, dtype=np.float32) -> "ExpertParams":
        width = expert_width(c, k)
        return cls(
            kaiming(rng, (width, e), width, dtype),
            zeros((e,), dtype),
            kaiming(rng, (e, 2), e, dtype),
            zeros((2,), dtype),
        )

    @property
    def input_width(self) -> int:
        return self.expert_w.shape[0]


@dataclass
class SimilarityOutput:
    logits: np.ndarray  # (2,) [different, same]

    @property
    def probability_same(self) -> float:
        z = self.logits.astype(np.float64)
        return float(1.0 / (1.0 + np.exp(z[DIFFERENT] - z[SAME])))

    @property
    def probability_different(self) -> float:
        return 1.0 - self.probability_same

    @property
    def margin(self) -> float:
        """Logit of ``probability_same``; a non-saturating ranking score."""
        return float(self.logits[SAME] - self.logits[DIFFERENT])


def expert_width(c: int, k: int) -> int:
    return 2 * c + k + 1


def build_expert_input(v1, v2, k: int, num_landmarks: int) -> np.ndarray:
    """``[v1 | v2 | one-hot(k)]`` for landmark ``k`` out of K+1 slots."""
    v1, v2 = np.asarray(v1), np.asarray(v2)
    if not 0 <= k <= num_landmarks:
        raise ValueError(f"landmark index {k} outside [0, {num_landmarks}]")
    if v1.shape != v2.shape or v1.ndim != 1:
        raise T.ShapeError(f"descriptor shapes {v1.shape} and {v2.shape} disagree")
    tag = np.zeros(num_landmarks + 1, dtype=v1.dtype)
    tag[k] = 1
    return np.concatenate([v1, v2, tag])


def expert_inputs(d1: Tensor, d2: Tensor) -> Tensor:
    """Batched expert inputs: (B, K+1, C) x2 -> (B, K+1, 2C+K+1)."""
    if d1.shape != d2.shape:
        raise T.ShapeError(f"descriptor sets {d1.shape} and {d2.shape} differ")
    b, kk, _ = d1.shape
    tags = Tensor(np.broadcast_to(np.eye(kk, dtype=d1.dtype), (b, kk, kk)).copy())
    return T.concat([d1, d2, tags], axis=-1)


def compare_logits(d1: Tensor, d2: Tensor, params: ExpertParams) -> Tensor:
    """Expert layer, ReLU, coordinate-wise max over landmarks, 2-way head.

    ``d1`` and ``d2`` are already L2-normalized (B, K+1, C) tensors.
    """
    x = expert_inputs(d1, d2)
    if x.shape[-1] != params.input_width:
        raise T.ShapeError(f"expert input width {x.shape[-1]} != {params.input_width}")
    h = T.relu(T.linear(x, params.expert_w, params.expert_b))
    pooled = T.max_reduce(h, axis=1)
    return T.linear(pooled, params.cls_w, params.cls_b)


def symmetric_logits(d1: Tensor, d2: Tensor, params: ExpertParams) -> Tensor:
    """Mean of the logits for both argument orders."""
    return T.scale(T.add(compare_logits(d1, d2, params), compare_logits(d2, d1, params)), 0.5)


def compare_templates(
    d1: DescriptorSet,
    d2: DescriptorSet,
    params: ExpertParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> SimilarityOutput:
    if d1.vectors.shape[0] != d2.vectors.shape[0]:
        raise T.ShapeError(f"descriptor sets have {d1.vectors.shape[0]} and {d2.vectors.shape[0]} rows")
    a = T.reshape(d1.normalized(), (1,) + d1.vectors.shape)
    b = T.reshape(d2.normalized(), (1,) + d2.vectors.shape)
    if mode == "eval":
        logits = symmetric_logits(a, b, params)
    elif mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng for the pair ordering")
        logits = compare_logits(b, a, params) if rng.random() < 0.5 else compare_logits(a, b, params)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return SimilarityOutput(np.asarray(logits.data[0]))
