"""Landmark regularizers, identity / verification losses and their weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .detect import STRIDE
from .params import ParamGroup, kaiming, zeros
from .synth import Pose
from .tensor import Tensor

KEYPOINTS_PER_POSE = 4
TARGET_SIGMA = 1.0  # grid cells


@dataclass
class LossSchedule:
    alpha1: float = 2.0
    alpha2: float = 5.0
    alpha3_init: float = 30.0
    decay_period: int = 1000
    decay_factor: float = 0.5

    def alpha3(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be non-negative")
        return self.alpha3_init * self.decay_factor ** (step // self.decay_period)


@dataclass
class LossBreakdown:
    cls1: float
    cls2: float
    sim: float
    reg: float
    total: float
    alpha1: float
    alpha2: float
    alpha3: float
    step: int
    total_tensor: Tensor | None = None

    def row(self) -> dict:
        return {
            "step": self.step,
            "cls1": self.cls1,
            "cls2": self.cls2,
            "sim": self.sim,
            "reg": self.reg,
            "alpha3": self.alpha3,
            "total": self.total,
        }


@dataclass
class ClassifierParams(ParamGroup):
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, classes: int, dtype=np.float32) -> "ClassifierParams":
        return cls(kaiming(rng, (c, classes), c, dtype), zeros((classes,), dtype))

    @property
    def classes(self) -> int:
        return self.w.shape[1]


@dataclass
class KeypointTarget:
    p_hat: np.ndarray  # (..., N, h, w, K)
    active: np.ndarray  # (..., N, K) bool

    def mask(self, dtype) -> np.ndarray:
        shape = self.active.shape[:-1] + (1, 1, self.active.shape[-1])
        return np.broadcast_to(self.active.reshape(shape), self.p_hat.shape).astype(dtype)


# --------------------------------------------------------------------------
# regularizers
# --------------------------------------------------------------------------


def diversity_loss(p: Tensor) -> Tensor:
    """nK minus the summed channel-max of self-normalized maps.

    ``p`` is (N, h, w, K) for one template, or (T, N, h, w, K) for a batch,
    in which case the per-template values are averaged.
    """
    if p.ndim not in (4, 5):
        raise T.ShapeError(f"diversity_loss expects (..., N, h, w, K), got {p.shape}")
    templates = 1 if p.ndim == 4 else p.shape[0]
    n, k = p.shape[-4], p.shape[-1]
    covered = T.sum(T.max_reduce(p, axis=-1))
    return T.scale(T.sub(Tensor(np.asarray(templates * n * k, dtype=p.dtype)), covered), 1.0 / templates)


def pose_channels(pose: Pose) -> list:
    base = KEYPOINTS_PER_POSE * int(pose)
    return list(range(base, base + KEYPOINTS_PER_POSE))


def keypoint_target(keypoints, poses, grid: tuple, k: int = 12, stride: int = STRIDE, sigma: float = TARGET_SIGMA) -> KeypointTarget:
    """Normalized Gaussian targets at each visible keypoint's grid cell.

    ``keypoints`` is (N, 4, 2) pixel coordinates (occluded = -1), ``poses``
    a length-N sequence. Channel ``4 * pose + j`` supervises keypoint j.
    """
    kps = np.asarray(keypoints, dtype=np.float64)
    n = kps.shape[0]
    if k < KEYPOINTS_PER_POSE * len(Pose):
        raise ValueError(f"keypoint supervision needs K >= {KEYPOINTS_PER_POSE * len(Pose)}, got {k}")
    h, w = grid
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    p_hat = np.zeros((n, h, w, k))
    active = np.zeros((n, k), dtype=bool)
    for i in range(n):
        for j, ch in enumerate(pose_channels(Pose(int(poses[i])))):
            x, y = kps[i, j]
            if x < 0 and y < 0:
                continue
            cx, cy = (x + 0.5) / stride - 0.5, (y + 0.5) / stride - 0.5
            blob = np.exp(-0.5 * ((gx - cx) ** 2 + (gy - cy) ** 2) / sigma**2)
            p_hat[i, :, :, ch] = blob / blob.sum()
            active[i, ch] = True
    return KeypointTarget(p_hat, active)


def stack_targets(targets) -> KeypointTarget:
    return KeypointTarget(np.stack([t.p_hat for t in targets]), np.stack([t.active for t in targets]))


def keypoint_loss(p: Tensor, target: KeypointTarget) -> Tensor:
    """Half squared error on pose-specific active channels only.

    Batched (T, N, h, w, K) inputs are averaged over templates.
    """
    if p.shape != target.p_hat.shape:
        raise T.ShapeError(f"maps {p.shape} and target {target.p_hat.shape} disagree")
    templates = 1 if p.ndim == 4 else p.shape[0]
    mask = Tensor(target.mask(p.dtype))
    diff = T.mul(T.sub(p, Tensor(target.p_hat.astype(p.dtype))), mask)
    return T.scale(T.sum(T.square(diff)), 0.5 / templates)


# --------------------------------------------------------------------------
# classification losses
# --------------------------------------------------------------------------


def template_cls_loss(global_descriptor: Tensor, identity, classifier: ClassifierParams) -> Tensor:
    """Softmax cross-entropy of pooled global descriptors against identity labels."""
    x = global_descriptor if global_descriptor.ndim == 2 else T.reshape(global_descriptor, (1, -1))
    labels = np.atleast_1d(np.asarray(identity, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= classifier.classes:
        raise ValueError(f"unknown identity label outside [0, {classifier.classes})")
    return T.cross_entropy(T.linear(x, classifier.w, classifier.b), labels)


def similarity_loss(logits: Tensor, same) -> Tensor:
    return T.cross_entropy(logits, np.asarray(same, dtype=np.int64))


def total_loss(cls1, cls2, sim, reg, step: int, schedule: LossSchedule | None = None) -> LossBreakdown:
    """Weighted sum of the four terms. Terms may be floats or scalar tensors."""
    schedule = schedule or LossSchedule()
    a3 = schedule.alpha3(step)
    terms = [t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64)) for t in (cls1, cls2, sim, reg)]
    dtype = terms[0].dtype
    terms = [t if t.dtype == dtype else Tensor(t.data.astype(dtype)) for t in terms]
    c1, c2, s, r = terms
    total = T.add(T.add(T.scale(T.add(c1, c2), schedule.alpha1), T.scale(s, schedule.alpha2)), T.scale(r, a3))
    return LossBreakdown(
        cls1=c1.item(),
        cls2=c2.item(),
        sim=s.item(),
        reg=r.item(),
        total=total.item(),
        alpha1=schedule.alpha1,
        alpha2=schedule.alpha2,
        alpha3=a3,
        step=step,
        total_tensor=total,
    )
