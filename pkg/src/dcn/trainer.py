"""End-to-end training of the comparator and of the baseline classifier."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import from_strings, to_strings
from .mining import Bucket, EmbeddingStore, build_mining_round, sample_pairs
from .network import BaselineParams, DCNParams, baseline_logits, embed_images, pair_forward
from .objectives import (
    LossBreakdown,
    LossSchedule,
    diversity_loss,
    keypoint_loss,
    keypoint_target,
    similarity_loss,
    stack_targets,
    template_cls_loss,
    total_loss,
)
from .optim import Adam
from .synth import Dataset, augment

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "cls1", "cls2", "sim", "reg", "alpha3", "total")
REGULARIZERS = ("diversity", "keypoints")


class NumericalError(ArithmeticError):
    def __init__(self, step: int, component: str, value: float):
        super().__init__(f"non-finite {component} loss ({value}) at step {step}")
        self.step = step
        self.component = component


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_pairs: int = 16
    images_per_template: int = 3
    k: int = 12
    channels: tuple = (16, 32, 64)
    expert_width: int = 256
    regularizer: str = "diversity"
    alpha1: float = 2.0
    alpha2: float = 5.0
    alpha3_init: float = 30.0
    decay_period: int = 1000
    train_seed: int = 0
    precision: int = 32
    max_steps: int = 5000
    lr_drop_factor: float = 10.0
    max_lr_drops: int = 2
    plateau_window: int = 200
    plateau_threshold: float = 0.01
    mining_refresh: int = 200
    mining_identities: int = 64
    bucket_centers: tuple = (0.3, 0.5)
    bucket_half_width: float = 0.1
    bucket_weights: tuple = (1.0, 1.0)
    duplicate_prob: float = 0.2
    augment: bool = True
    baseline_steps: int = 1500
    baseline_batch: int = 64
    baseline_lr: float = 3e-3
    deterministic: bool = False
    # opt-in warm start: copy the baseline backbone into Detect, optionally
    # with a smaller lr on the whole Detect module
    init_from_baseline: bool = False
    detect_lr_scale: float = 1.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.bucket_centers = tuple(float(c) for c in self.bucket_centers)
        self.bucket_weights = tuple(float(w) for w in self.bucket_weights)

    def validate(self) -> None:
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        positive = ("lr", "batch_pairs", "images_per_template", "k", "expert_width", "max_steps", "decay_period",
                    "plateau_window", "mining_refresh", "mining_identities", "lr_drop_factor", "baseline_batch",
        "detect_lr_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if len(self.bucket_centers) != len(self.bucket_weights):
            raise ValueError("bucket_centers and bucket_weights differ in length")
        if self.regularizer == "keypoints" and self.k < 12:
            raise ValueError("keypoint supervision needs k >= 12")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def schedule(self) -> LossSchedule:
        return LossSchedule(self.alpha1, self.alpha2, self.alpha3_init, self.decay_period)

    @property
    def buckets(self) -> tuple:
        return tuple(Bucket(c, self.bucket_half_width, w) for c, w in zip(self.bucket_centers, self.bucket_weights))

    def images_per_step(self) -> int:
        return self.batch_pairs * 2 * self.images_per_template

    def to_strings(self) -> dict:
        return to_strings(self)

    @classmethod
    def from_strings(cls, values: dict) -> "TrainConfig":
        return from_strings(cls, values)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


@dataclass
class SamplePool:
    """Training samples grouped for fast template assembly."""

    samples: list
    identities: np.ndarray
    class_index: dict  # identity id -> classifier label

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "SamplePool":
        train = set(ds.train_ids)
        samples = [s for s in ds.samples if s.identity in train]
        ids = np.array([s.identity for s in samples])
        return cls(samples, ids, {ident: i for i, ident in enumerate(sorted(train))})

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])


@dataclass
class PairBatch:
    images1: np.ndarray  # (B, N, H, W, 3)
    images2: np.ndarray
    same: np.ndarray  # (B,)
    class1: np.ndarray
    class2: np.ndarray
    keypoints1: np.ndarray  # (B, N, 4, 2)
    keypoints2: np.ndarray
    poses1: np.ndarray  # (B, N)
    poses2: np.ndarray

    @property
    def num_images(self) -> int:
        return int(self.images1.shape[0] * self.images1.shape[1] * 2)


def make_pair_batch(pool: SamplePool, templates, pairs, rng: np.random.Generator, use_augment: bool = True) -> PairBatch:
    """Gather the images of sampled template pairs; the tower order is random per pair."""
    towers = ([], [])
    for i, j, label in pairs:
        a, b = (j, i) if rng.random() < 0.5 else (i, j)
        for side, t in zip(towers, (a, b)):
            samples = [pool.samples[idx] for idx in templates[t]]
            if use_augment:
                samples = [augment(s, rng) for s in samples]
            side.append(samples)

    def stack(side, attr):
        return np.stack([np.stack([getattr(s, attr) for s in tpl]) for tpl in side])

    return PairBatch(
        images1=stack(towers[0], "image"),
        images2=stack(towers[1], "image"),
        same=np.array([p[2] for p in pairs], dtype=np.int64),
        class1=np.array([pool.class_index[tpl[0].identity] for tpl in towers[0]]),
        class2=np.array([pool.class_index[tpl[0].identity] for tpl in towers[1]]),
        keypoints1=stack(towers[0], "keypoints"),
        keypoints2=stack(towers[1], "keypoints"),
        poses1=np.array([[int(s.pose) for s in tpl] for tpl in towers[0]]),
        poses2=np.array([[int(s.pose) for s in tpl] for tpl in towers[1]]),
    )


def _batch_targets(kps: np.ndarray, poses: np.ndarray, grid, k: int):
    return stack_targets([keypoint_target(kps[b], poses[b], grid, k) for b in range(kps.shape[0])])


def pair_loss(params: DCNParams, batch: PairBatch, step: int, schedule: LossSchedule, regularizer: str) -> LossBreakdown:
    out = pair_forward(batch.images1, batch.images2, params)
    cls1 = template_cls_loss(out.global1, batch.class1, params.classifier)
    cls2 = template_cls_loss(out.global2, batch.class2, params.classifier)
    sim = similarity_loss(out.logits, batch.same)
    p = T.concat([out.first.landmark_probs, out.second.landmark_probs], axis=0)
    if regularizer == "diversity":
        reg = diversity_loss(p)
    else:
        kps = np.concatenate([batch.keypoints1, batch.keypoints2])
        poses = np.concatenate([batch.poses1, batch.poses2])
        reg = keypoint_loss(p, _batch_targets(kps, poses, p.shape[-3:-1], params.k))
    return total_loss(cls1, cls2, sim, reg, step, schedule)


def _check_finite(b: LossBreakdown) -> None:
    for name in ("cls1", "cls2", "sim", "reg", "total"):
        v = getattr(b, name)
        if not math.isfinite(v):
            raise NumericalError(b.step, name, v)


# --------------------------------------------------------------------------
# plateau rule
# --------------------------------------------------------------------------


class PlateauTracker:
    """Divide the lr when the windowed mean loss fails to improve twice in a row."""

    def __init__(self, window: int, threshold: float, factor: float, max_drops: int):
        self.window = window
        self.threshold = threshold
        self.factor = factor
        self.max_drops = max_drops
        self.values: list = []
        self.prev_mean: float | None = None
        self.strikes = 0
        self.drops = 0

    def update(self, value: float, lr: float) -> float:
        self.values.append(value)
        if len(self.values) < self.window:
            return lr
        m = float(np.mean(self.values))
        self.values = []
        if self.prev_mean is not None:
            improved = m < self.prev_mean * (1.0 - self.threshold)
            self.strikes = 0 if improved else self.strikes + 1
        self.prev_mean = m
        if self.strikes >= 2 and self.drops < self.max_drops:
            self.drops += 1
            self.strikes = 0
            lr = lr / self.factor
            log.info("loss plateau: lr dropped to %g", lr)
        return lr


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------


def blas_scope(config: TrainConfig):
    """Single-threaded BLAS in deterministic mode, so reduction order never varies."""
    return threadpool_limits(limits=1) if config.deterministic else contextlib.nullcontext()


def train_baseline(config: TrainConfig, dataset: Dataset) -> BaselineParams:
    """Single-image identity classifier; its pooled feature is the baseline embedding."""
    config.validate()
    with blas_scope(config):
        return _train_baseline(config, dataset)


def _train_baseline(config: TrainConfig, dataset: Dataset) -> BaselineParams:
    pool = SamplePool.from_dataset(dataset)
    rng = np.random.default_rng([config.train_seed, 0xBA5E])
    params = BaselineParams.init(rng, len(pool.class_index), config.channels, config.dtype)
    opt = Adam(params.named(), lr=config.baseline_lr)
    images = pool.images()
    labels = np.array([pool.class_index[i] for i in pool.identities])
    tracker = PlateauTracker(config.plateau_window, config.plateau_threshold, config.lr_drop_factor, config.max_lr_drops)
    for step in range(config.baseline_steps):
        idx = rng.choice(len(images), size=config.baseline_batch, replace=False)
        batch = images[idx]
        if config.augment:
            batch = np.stack([augment(pool.samples[i], rng).image for i in idx])
        opt.zero_grad()
        loss = T.cross_entropy(baseline_logits(batch, params), labels[idx])
        if not math.isfinite(loss.item()):
            raise NumericalError(step, "baseline", loss.item())
        loss.backward()
        opt.step()
        opt.lr = tracker.update(loss.item(), opt.lr)
        if step % 200 == 0:
            log.info("baseline step %d loss %.4f", step, loss.item())
    return params


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    embedder: BaselineParams | None = None,
) -> Checkpoint:
    """Train the comparator; returns (and, with ``out_dir``, writes) the final checkpoint."""
    config.validate()
    with blas_scope(config):
        return _train(config, dataset, out_dir, embedder)


def _train(config: TrainConfig, dataset: Dataset, out_dir, embedder) -> Checkpoint:
    pool = SamplePool.from_dataset(dataset)
    if config.mining_identities > len(pool.class_index):
        raise ValueError(f"mining needs {config.mining_identities} identities, dataset has {len(pool.class_index)}")
    if embedder is None:
        embedder = train_baseline(config, dataset)
    store = EmbeddingStore(embed_images(pool.images(), embedder), pool.identities)

    rng = np.random.default_rng([config.train_seed, 0xDC17])
    params = DCNParams.init(rng, len(pool.class_index), config.channels, config.k, config.expert_width, config.dtype)
    if config.init_from_baseline:
        params.detect.backbone.load_arrays({k: t.data for k, t in embedder.backbone.named().items()})
    scale = {name: config.detect_lr_scale for name in params.named() if name.startswith("detect.")}
    opt = Adam(params.named(), lr=config.lr, lr_scale=scale)
    schedule = config.schedule
    tracker = PlateauTracker(config.plateau_window, config.plateau_threshold, config.lr_drop_factor, config.max_lr_drops)

    out = Path(out_dir) if out_dir is not None else None
    rows = []
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
    try:
        mround = None
        for step in range(config.max_steps):
            if step % config.mining_refresh == 0:
                mround = build_mining_round(
                    store, rng, config.mining_identities, 2, config.images_per_template, config.duplicate_prob
                )
            pairs = sample_pairs(mround.difficulty, 2 * (config.batch_pairs // 2), rng, config.buckets)
            batch = make_pair_batch(pool, mround.templates, pairs, rng, config.augment)
            opt.zero_grad()
            b = pair_loss(params, batch, step, schedule, config.regularizer)
            _check_finite(b)
            b.total_tensor.backward()
            opt.step()
            opt.lr = tracker.update(b.total, opt.lr)
            row = b.row()
            rows.append(row)
            if writer is not None:
                writer.writerow([row[c] if c == "step" else repr(float(row[c])) for c in LOSS_COLUMNS])
            if step % 100 == 0:
                log.info("step %d total %.4f sim %.4f cls %.4f reg %.4f", step, b.total, b.sim, b.cls1, b.reg)
    finally:
        if fh is not None:
            fh.close()

    ckpt = make_checkpoint(params, opt, config, config.max_steps, kind="dcn")
    if out is not None:
        save_checkpoint(ckpt, out / "dcn.ckpt")
        save_checkpoint(make_checkpoint(embedder, None, config, config.baseline_steps, kind="baseline"), out / "baseline.ckpt")
    return ckpt


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def make_checkpoint(params, opt: Adam | None, config: TrainConfig, step: int, kind: str) -> Checkpoint:
    tensors = {name: t.data for name, t in params.named().items()}
    meta = {"kind": kind, "classes": params.classifier.classes}
    if opt is not None:
        tensors.update(opt.state_arrays())
        meta.update(adam_t=opt.t, adam_lr=opt.lr, adam_beta1=opt.beta1, adam_beta2=opt.beta2, adam_eps=opt.eps)
    return Checkpoint(tensors, step=step, precision=config.precision, config=config.to_strings(), meta=meta)


def params_from_checkpoint(ckpt: Checkpoint):
    """Rebuild DCN or baseline parameters (by ``meta.kind``) from a checkpoint."""
    config = TrainConfig.from_strings(ckpt.config)
    classes = int(ckpt.meta["classes"])
    rng = np.random.default_rng(0)
    dtype = np.float64 if ckpt.precision == 64 else np.float32
    if ckpt.meta.get("kind") == "baseline":
        params = BaselineParams.init(rng, classes, config.channels, dtype)
    else:
        params = DCNParams.init(rng, classes, config.channels, config.k, config.expert_width, dtype)
    params.load_arrays(ckpt.tensors)
    return params


def load_params(path):
    return params_from_checkpoint(load_checkpoint(path))
