"""Procedural face-like identities with exact keypoint annotations.

A face is an oval with two eye blobs, an elongated nose blob and a mouth
arc, placed on a smoothed-noise background. Identity lives in the part
geometry (:class:`IdentitySpec`); each render adds yaw, lighting,
translation jitter and a quality degradation (blur plus down/up
resampling). Keypoints are projected through the same yaw rotation used to
draw the glyphs, so annotations are exact.

Pixel coordinates are (x, y) with pixel (row i, col j) centered at x=j, y=i.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

KEYPOINT_NAMES = ("left_eye", "right_eye", "nose", "mouth")
OCCLUDED = (-1.0, -1.0)

LEFT_PROFILE_MAX = 0.3
RIGHT_PROFILE_MIN = 3.0
DUPLICATE_PROB = 0.2
AUGMENT_PROB = 0.2
AUGMENTATIONS = ("flip", "gaussian_blur", "motion_blur", "monochrome")

MAX_YAW_DEG = 70.0
MAX_BLUR_SIGMA = 2.5

# (low, high) per identity parameter, in face units (oval half-height = 1)
# except base_intensity, which is in [0, 1] image units
PARAM_RANGES = {
    "face_aspect": (0.72, 0.95),
    "eye_spacing": (0.52, 0.92),
    "eye_size": (0.09, 0.17),
    "nose_offset": (-0.06, 0.06),
    "mouth_width": (0.35, 0.75),
    "mouth_curvature": (-0.14, 0.14),
    "base_intensity": (0.62, 0.78),
}
PARAM_NAMES = tuple(PARAM_RANGES)

# vertical placement and depth of the parts (face units, y grows downward)
EYE_Y, NOSE_Y, MOUTH_Y = -0.22, 0.16, 0.50
EYE_Z, NOSE_Z, MOUTH_Z = 0.62, 1.10, 0.78
FACE_HALF_HEIGHT = 0.36  # fraction of image size


class Pose(IntEnum):
    LEFT_PROFILE = 0
    FRONTAL = 1
    RIGHT_PROFILE = 2


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    params: np.ndarray

    def __getattr__(self, name):
        if name in PARAM_RANGES:
            return float(self.params[PARAM_NAMES.index(name)])
        raise AttributeError(name)

    def __eq__(self, other):
        return isinstance(other, IdentitySpec) and self.id == other.id and np.array_equal(self.params, other.params)

    def __hash__(self):
        return hash((self.id, self.params.tobytes()))


@dataclass
class RenderedSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], quantized to 8-bit levels
    keypoints: np.ndarray  # (4, 2) x, y; OCCLUDED rows are (-1, -1)
    pose: Pose
    quality: float
    identity: int = -1
    yaw: float = 0.0
    transform: str | None = None

    def visible(self) -> np.ndarray:
        return ~np.all(self.keypoints == -1.0, axis=1)


@dataclass
class Template:
    identity: int
    samples: list

    def __post_init__(self):
        if not self.samples:
            raise ValueError("template needs at least one sample")
        ids = {s.identity for s in self.samples}
        if ids != {self.identity}:
            raise ValueError(f"template of identity {self.identity} holds samples of {sorted(ids)}")

    def __len__(self):
        return len(self.samples)

    def images(self, dtype=np.float32) -> np.ndarray:
        return np.stack([s.image for s in self.samples]).astype(dtype)


# --------------------------------------------------------------------------
# identities and poses
# --------------------------------------------------------------------------


def generate_identity(dataset_seed: int, id: int) -> IdentitySpec:  # noqa: A002
    if id < 0:
        raise ValueError("identity id must be non-negative")
    rng = np.random.default_rng([dataset_seed, id, 0x1D])
    lo = np.array([r[0] for r in PARAM_RANGES.values()])
    hi = np.array([r[1] for r in PARAM_RANGES.values()])
    return IdentitySpec(id=id, params=lo + (hi - lo) * rng.random(len(lo)))


def symmetric_identity(id: int = 0) -> IdentitySpec:  # noqa: A002
    """Mid-range identity with a centered nose."""
    params = np.array([(lo + hi) / 2 for lo, hi in PARAM_RANGES.values()])
    return IdentitySpec(id=id, params=params)


def pose_from_ratio(ratio: float) -> Pose:
    if ratio < LEFT_PROFILE_MAX:
        return Pose.LEFT_PROFILE
    if ratio > RIGHT_PROFILE_MIN:
        return Pose.RIGHT_PROFILE
    return Pose.FRONTAL


def eye_nose_ratio(left_eye_x: float, right_eye_x: float, nose_x: float) -> float:
    """Horizontal nose-to-left-eye over nose-to-right-eye distance.

    A nose that has crossed an eye gives a ratio of 0 (or +inf on the right).
    """
    alpha = nose_x - left_eye_x
    theta = right_eye_x - nose_x
    if theta <= 0:
        return float("inf")
    return max(alpha, 0.0) / theta


def _project(spec: IdentitySpec, yaw: float):
    """Face-unit (x, y) of each keypoint after rotating the head by ``yaw``."""
    beta = np.deg2rad(MAX_YAW_DEG) * float(np.clip(yaw, -1.0, 1.0))
    c, s = np.cos(beta), np.sin(beta)
    half = spec.eye_spacing / 2
    pts3 = np.array(
        [
            [-half, EYE_Y, EYE_Z],
            [half, EYE_Y, EYE_Z],
            [spec.nose_offset, NOSE_Y, NOSE_Z],
            [0.0, MOUTH_Y, MOUTH_Z],
        ]
    )
    xs = pts3[:, 0] * c + pts3[:, 2] * s - EYE_Z * s  # eyes' depth plane stays put
    return np.stack([xs, pts3[:, 1]], axis=1), c, s


def keypoint_layout(spec: IdentitySpec, yaw: float, size: int = 48, shift=(0.0, 0.0)):
    """Pixel keypoints (before occlusion), pose, and the eye-nose ratio."""
    pts, _, _ = _project(spec, yaw)
    unit = FACE_HALF_HEIGHT * size
    centre = (size - 1) / 2
    px = np.empty((4, 2))
    px[:, 0] = centre + shift[0] + pts[:, 0] * unit
    px[:, 1] = centre + shift[1] + pts[:, 1] * unit
    ratio = eye_nose_ratio(px[0, 0], px[1, 0], px[2, 0])
    return px, pose_from_ratio(ratio), ratio


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


def _gauss(xx, yy, x0, y0, sx, sy):
    return np.exp(-0.5 * (((xx - x0) / sx) ** 2 + ((yy - y0) / sy) ** 2))


def sample_quality(rng: np.random.Generator) -> float:
    """Mostly sharp images with a heavy tail of degraded ones."""
    if rng.random() < 0.35:
        return float(rng.uniform(0.0, 0.45))
    return float(rng.uniform(0.6, 1.0))


def quality_transform(quality: float) -> tuple[float, int]:
    """Blur sigma (px) and resampling factor for a quality in [0, 1]."""
    q = float(np.clip(quality, 0.0, 1.0))
    factor = 1 if q >= 2 / 3 else (2 if q >= 1 / 3 else 4)
    return MAX_BLUR_SIGMA * (1.0 - q), factor


def _down_up(img: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return img
    h, w, c = img.shape
    ph, pw = (-h) % f, (-w) % f
    p = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    blocks = p.reshape((h + ph) // f, f, (w + pw) // f, f, c).mean(axis=(1, 3))
    return np.repeat(np.repeat(blocks, f, axis=0), f, axis=1)[:h, :w]


def render_glyphs(spec: IdentitySpec, yaw: float, size: int = 48, shift=(0.0, 0.0)):
    """Per-glyph alpha maps plus keypoints, pose, ratio and the face mask.

    Returns a dict with keys ``oval``, ``left_eye``, ``right_eye``, ``nose``,
    ``mouth`` (alpha maps in [0, 1]), ``keypoints``, ``pose`` and ``ratio``.
    An occluded eye has an all-zero alpha map.
    """
    kp, pose, ratio = keypoint_layout(spec, yaw, size, shift)
    _, c, _ = _project(spec, yaw)
    unit = FACE_HALF_HEIGHT * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2

    ox, oy = centre + shift[0], centre + shift[1] + 0.05 * unit
    rx = spec.face_aspect * unit * (0.75 + 0.25 * c)
    ry = 1.05 * unit
    dist = np.sqrt(((xx - ox) / rx) ** 2 + ((yy - oy) / ry) ** 2)
    layers = {"oval": 1.0 / (1.0 + np.exp((dist - 1.0) * 14.0))}

    sig = spec.eye_size * unit
    for k, name in enumerate(("left_eye", "right_eye")):
        occluded = (pose is Pose.LEFT_PROFILE and k == 0) or (pose is Pose.RIGHT_PROFILE and k == 1)
        layers[name] = np.zeros_like(xx) if occluded else _gauss(xx, yy, kp[k, 0], kp[k, 1], sig * (0.6 + 0.4 * c), sig)
    layers["nose"] = _gauss(xx, yy, kp[2, 0], kp[2, 1], 0.06 * unit, 0.13 * unit)

    # arc samples offset so their mean sits exactly on the keypoint
    t = np.linspace(-1.0, 1.0, 13)
    ax = kp[3, 0] + t * spec.mouth_width / 2 * unit * c
    ay = kp[3, 1] + spec.mouth_curvature * unit * (t**2 - np.mean(t**2))
    mouth = np.zeros_like(xx)
    for x0, y0 in zip(ax, ay):
        mouth += _gauss(xx, yy, x0, y0, 0.9, 0.9)
    layers["mouth"] = mouth / max(mouth.max(), 1e-12)

    for k, name in enumerate(("left_eye", "right_eye")):
        if not layers[name].any():
            kp[k] = OCCLUDED
    return {**layers, "keypoints": kp, "pose": pose, "ratio": ratio}


def render_sample(
    spec: IdentitySpec,
    yaw: float,
    quality: float,
    rng: np.random.Generator,
    size: int = 48,
    jitter: float = 2.0,
) -> RenderedSample:
    shift = tuple(rng.uniform(-jitter, jitter, size=2)) if jitter else (0.0, 0.0)
    g = render_glyphs(spec, yaw, size, shift)

    noise = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(2.0, 2.0, 0.0))
    background = np.clip(0.45 + 0.9 * noise + rng.uniform(-0.15, 0.15), 0.0, 1.0)
    gain = rng.uniform(0.85, 1.15)
    tint = np.array([1.0, 0.86, 0.74])

    face = spec.base_intensity * gain * np.ones((size, size))
    face = face - 0.55 * (g["left_eye"] + g["right_eye"]) - 0.22 * g["nose"] - 0.45 * g["mouth"]
    oval = g["oval"][..., None]
    img = background * (1 - oval) + face[..., None] * tint * oval

    sigma, factor = quality_transform(quality)
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0.0))
    img = _down_up(img, factor)
    img = img + rng.normal(0.0, 0.02, img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return RenderedSample(
        image=img.astype(np.float32),
        keypoints=g["keypoints"],
        pose=g["pose"],
        quality=float(quality),
        identity=spec.id,
        yaw=float(yaw),
    )


# --------------------------------------------------------------------------
# templates and augmentation
# --------------------------------------------------------------------------


def draw_duplicate(rng: np.random.Generator) -> bool:
    return bool(rng.random() < DUPLICATE_PROB)


def assemble_template(spec: IdentitySpec, n: int, rng: np.random.Generator, size: int = 48) -> Template:
    """``n`` renders of one identity; with probability 0.2 all are one image."""
    if n < 1:
        raise ValueError("template size must be at least 1")
    if n > 1 and draw_duplicate(rng):
        s = render_sample(spec, rng.uniform(-1, 1), sample_quality(rng), rng, size)
        return Template(spec.id, [dataclasses.replace(s) for _ in range(n)])
    samples = [render_sample(spec, rng.uniform(-1, 1), sample_quality(rng), rng, size) for _ in range(n)]
    return Template(spec.id, samples)


def apply_transform(sample: RenderedSample, name: str, rng: np.random.Generator | None = None) -> RenderedSample:
    img = sample.image
    kp = sample.keypoints.copy()
    pose = sample.pose
    if name == "flip":
        w = img.shape[1]
        img = img[:, ::-1]
        vis = ~np.all(kp == -1.0, axis=1)
        kp[vis, 0] = (w - 1) - kp[vis, 0]
        kp[[0, 1]] = kp[[1, 0]]
        pose = Pose(2 - int(pose))
    elif name == "gaussian_blur":
        img = ndimage.gaussian_filter(img, sigma=(1.0, 1.0, 0.0))
    elif name == "motion_blur":
        length = 5 if rng is None else int(rng.integers(3, 8))
        img = ndimage.uniform_filter1d(img, size=length, axis=1, mode="nearest")
    elif name == "monochrome":
        img = np.repeat(img.mean(axis=2, keepdims=True), 3, axis=2)
    else:
        raise ValueError(f"unknown augmentation {name!r}")
    return dataclasses.replace(
        sample, image=np.ascontiguousarray(img, dtype=np.float32), keypoints=kp, pose=pose, transform=name
    )


def augment(sample: RenderedSample, rng: np.random.Generator) -> RenderedSample:
    """With probability 0.2 apply exactly one of the four augmentations."""
    if rng.random() >= AUGMENT_PROB:
        return sample
    return apply_transform(sample, AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))], rng)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class DataConfig:
    dataset_seed: int = 7
    train_identities: int = 100
    test_identities: int = 40
    samples_per_identity: int = 40
    image_size: int = 48


@dataclass
class Dataset:
    config: DataConfig
    samples: list = field(repr=False)
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def by_identity(self) -> dict:
        out: dict[int, list] = {}
        for s in self.samples:
            out.setdefault(s.identity, []).append(s)
        return out


def render_identity_samples(cfg: DataConfig, identity: int) -> list:
    spec = generate_identity(cfg.dataset_seed, identity)
    out = []
    for i in range(cfg.samples_per_identity):
        rng = np.random.default_rng([cfg.dataset_seed, identity, i, 0x5A])
        out.append(render_sample(spec, rng.uniform(-1, 1), sample_quality(rng), rng, cfg.image_size))
    return out


def generate_dataset(cfg: DataConfig) -> Dataset:
    """Pure function of the config: identities 0..train-1 train, the rest test."""
    n = cfg.train_identities + cfg.test_identities
    samples = []
    for identity in range(n):
        samples.extend(render_identity_samples(cfg, identity))
    return Dataset(
        cfg,
        samples,
        train_ids=list(range(cfg.train_identities)),
        test_ids=list(range(cfg.train_identities, n)),
    )


# --------------------------------------------------------------------------
# export / import
# --------------------------------------------------------------------------

MANIFEST = "manifest.txt"
SPLITS = "splits.txt"


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def export_dataset(ds: Dataset, out_dir) -> Path:
    """Write one PNG per sample plus ``manifest.txt`` and ``splits.txt``."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counters: dict[int, int] = {}
    lines = ["# sample_path,identity_id,pose,quality,lx,ly,rx,ry,nx,ny,mx,my"]
    for s in ds.samples:
        idx = counters.get(s.identity, 0)
        counters[s.identity] = idx + 1
        rel = f"id{s.identity:05d}/{idx:04d}.png"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        arr = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(out / rel, optimize=False)
        kps = ",".join(_fmt(v) for v in s.keypoints.reshape(-1))
        lines.append(f"{rel},{s.identity},{s.pose.name.lower()},{_fmt(s.quality)},{kps}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    split_lines = [f"{i},train" for i in ds.train_ids] + [f"{i},test" for i in ds.test_ids]
    (out / SPLITS).write_text("\n".join(split_lines) + "\n")
    return out / MANIFEST


def load_dataset(data_dir) -> Dataset:
    from PIL import Image

    root = Path(data_dir)
    if not (root / MANIFEST).exists():
        raise FileNotFoundError(os.fspath(root / MANIFEST))
    samples = []
    for line in (root / MANIFEST).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 12:
            raise ValueError(f"malformed manifest record: {line!r}")
        rel, ident, pose, quality = parts[:4]
        img = np.asarray(Image.open(root / rel).convert("RGB"), dtype=np.float32) / 255.0
        kp = np.array([float(v) for v in parts[4:]]).reshape(4, 2)
        samples.append(
            RenderedSample(image=img, keypoints=kp, pose=Pose[pose.upper()], quality=float(quality), identity=int(ident))
        )
    train_ids, test_ids = [], []
    for line in (root / SPLITS).read_text().splitlines():
        if line.strip():
            ident, split = line.split(",")
            (train_ids if split == "train" else test_ids).append(int(ident))
    size = samples[0].image.shape[0] if samples else 48
    per_id = len(samples) // max(1, len(train_ids) + len(test_ids))
    cfg = DataConfig(train_identities=len(train_ids), test_identities=len(test_ids), samples_per_identity=per_id, image_size=size)
    return Dataset(cfg, samples, train_ids, test_ids)
