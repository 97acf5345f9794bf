"""Two-tower comparator assembled from detect, attend and compare.

Also holds the average-pooling baseline classifier, which shares the
backbone architecture and serves as the mining embedder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attend import DescriptorSet, recalibrate, self_normalize
from .compare import ExpertParams, SimilarityOutput, compare_logits, symmetric_logits
from .detect import BackboneParams, DetectParams, backbone_forward, landmark_head, to_input
from .objectives import ClassifierParams
from .params import ParamGroup
from .tensor import Tensor


@dataclass
class DCNParams(ParamGroup):
    detect: DetectParams
    classifier: ClassifierParams
    expert: ExpertParams

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        classes: int,
        channels=(16, 32, 64),
        k: int = 12,
        expert_width: int = 256,
        dtype=np.float32,
    ) -> "DCNParams":
        det = DetectParams.init(rng, channels, k, dtype)
        c = channels[-1]
        return cls(det, ClassifierParams.init(rng, c, classes, dtype), ExpertParams.init(rng, c, k, expert_width, dtype))

    @property
    def dtype(self):
        return self.detect.head_w.dtype

    @property
    def k(self) -> int:
        return self.detect.k


@dataclass
class BaselineParams(ParamGroup):
    backbone: BackboneParams
    embed: ClassifierParams  # linear bottleneck on the pooled feature
    classifier: ClassifierParams

    @classmethod
    def init(cls, rng: np.random.Generator, classes: int, channels=(16, 32, 64), dtype=np.float32) -> "BaselineParams":
        bb = BackboneParams.init(rng, channels, dtype)
        c = channels[-1]
        return cls(bb, ClassifierParams.init(rng, c, c, dtype), ClassifierParams.init(rng, c, classes, dtype))

    @property
    def dtype(self):
        return self.backbone.conv1_w.dtype


@dataclass
class TemplateBatch:
    """Forward products of T same-size templates."""

    descriptors: Tensor  # (T, K+1, C) raw pooled
    normalized: Tensor  # (T, K+1, C)
    landmark_probs: Tensor  # (T, N, h, w, K) per-image spatial softmax
    scores: Tensor  # (T, N, h, w, K+1)


def encode_templates(images: np.ndarray, params: DCNParams) -> TemplateBatch:
    """``images`` is (T, N, H, W, 3); all templates share N."""
    t, n = images.shape[:2]
    x = to_input(images.reshape((t * n,) + images.shape[2:]), params.dtype)
    maps = landmark_head(backbone_forward(x, params.detect.backbone), params.detect)
    _, h, w, c = maps.F.shape
    F = T.reshape(maps.F, (t, n, h, w, c))
    scores = T.reshape(maps.scores, (t, n, h, w, params.k + 1))
    pooled = T.weighted_sum_pool(F, recalibrate(scores))
    probs = T.reshape(self_normalize(maps.A), (t, n, h, w, params.k))
    return TemplateBatch(pooled, T.l2_normalize(pooled, axis=-1), probs, scores)


def describe_template(images: np.ndarray, params: DCNParams) -> DescriptorSet:
    """DescriptorSet of one (N, H, W, 3) template."""
    tb = encode_templates(np.asarray(images)[None], params)
    return DescriptorSet(tb.descriptors[0])


@dataclass
class PairOutput:
    logits: Tensor  # (B, 2)
    first: TemplateBatch
    second: TemplateBatch
    global1: Tensor  # (B, C) raw global descriptors
    global2: Tensor


def pair_forward(images1: np.ndarray, images2: np.ndarray, params: DCNParams, symmetric: bool = False) -> PairOutput:
    """Both towers in one backbone pass. ``images*`` are (B, N, H, W, 3)."""
    b = images1.shape[0]
    tb = encode_templates(np.concatenate([images1, images2]), params)
    k = params.k
    d1 = tb.normalized[:b]
    d2 = tb.normalized[b:]
    logits = symmetric_logits(d1, d2, params.expert) if symmetric else compare_logits(d1, d2, params.expert)
    first = TemplateBatch(tb.descriptors[:b], d1, tb.landmark_probs[:b], tb.scores[:b])
    second = TemplateBatch(tb.descriptors[b:], d2, tb.landmark_probs[b:], tb.scores[b:])
    return PairOutput(logits, first, second, tb.descriptors[:b, k], tb.descriptors[b:, k])


def descriptor_bank(templates, params: DCNParams) -> np.ndarray:
    """Normalized (K+1, C) descriptors for a list of variable-size image stacks."""
    with T.no_grad():
        by_size: dict[int, list] = {}
        for i, imgs in enumerate(templates):
            by_size.setdefault(len(imgs), []).append(i)
        result = [None] * len(templates)
        for size, idx in by_size.items():
            for start in range(0, len(idx), 64):
                chunk = idx[start : start + 64]
                tb = encode_templates(np.stack([templates[i] for i in chunk]), params)
                for j, i in enumerate(chunk):
                    result[i] = tb.normalized.data[j]
    return np.stack(result)


def score_descriptor_pairs(bank: np.ndarray, pairs, params: DCNParams, chunk: int = 512) -> np.ndarray:
    """Symmetrized logit margins for (a, b) index pairs into ``bank``."""
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    out = []
    with T.no_grad():
        for s in range(0, len(a), chunk):
            la = symmetric_logits(Tensor(bank[a[s : s + chunk]]), Tensor(bank[b[s : s + chunk]]), params.expert).data
            out.append(la[:, 1].astype(np.float64) - la[:, 0])
    return np.concatenate(out) if out else np.zeros(0)


def compare_image_sets(images1: np.ndarray, images2: np.ndarray, params: DCNParams) -> SimilarityOutput:
    """Eval-mode similarity of two templates given as (N, H, W, 3) stacks."""
    bank = descriptor_bank([np.asarray(images1), np.asarray(images2)], params)
    with T.no_grad():
        logits = symmetric_logits(Tensor(bank[:1]), Tensor(bank[1:]), params.expert)
    return SimilarityOutput(np.asarray(logits.data[0]))


# --------------------------------------------------------------------------
# baseline
# --------------------------------------------------------------------------


def baseline_features(x: Tensor, params: BaselineParams) -> Tensor:
    """Linear embedding of the global-average-pooled backbone feature, (N, D)."""
    pooled = T.mean(backbone_forward(x, params.backbone), axis=(1, 2))
    return T.linear(pooled, params.embed.w, params.embed.b)


def baseline_logits(images: np.ndarray, params: BaselineParams) -> Tensor:
    feats = baseline_features(to_input(images, params.dtype), params)
    return T.linear(feats, params.classifier.w, params.classifier.b)


def embed_images(images: np.ndarray, params: BaselineParams, chunk: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(images), chunk):
            out.append(baseline_features(to_input(images[s : s + chunk], params.dtype), params).data)
    return np.concatenate(out).astype(np.float64)
