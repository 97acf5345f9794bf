"""Open-set 1:1 verification: protocols, ROC sweeps, baseline and fusion."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mining import template_descriptor

FAR_POINTS = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class RocCurve:
    """Accept-if-score >= threshold sweep, from (0, 0) at +inf down to (1, 1)."""

    thresholds: np.ndarray
    far: np.ndarray
    tar: np.ndarray
    n_genuine: int
    n_impostor: int


@dataclass
class OperatingPoint:
    tar: float
    far: float
    requested: float
    below_resolution: bool = False


@dataclass
class ProtocolSpec:
    pairs: list  # (template_a, template_b, label)
    template_identities: dict = field(default_factory=dict)

    def check_open_set(self, train_ids) -> None:
        overlap = set(self.template_identities.values()) & set(train_ids)
        if overlap:
            raise ValueError(f"protocol uses training identities {sorted(overlap)[:5]}")


def _validate(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d sequences")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if y.sum() == 0 or y.sum() == y.size:
        raise ValueError("ROC needs at least one genuine and one impostor pair")
    return s, y


def roc_curve(scores, labels) -> RocCurve:
    s, y = _validate(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(1 - y)[ends]
    n_gen, n_imp = int(y.sum()), int(y.size - y.sum())
    thresholds = np.r_[np.inf, s[ends]]
    tar = np.r_[0, tp] / n_gen
    far = np.r_[0, fp] / n_imp
    return RocCurve(thresholds, far, tar, n_gen, n_imp)


def tar_at_far(curve: RocCurve, far: float) -> OperatingPoint:
    """TAR at the largest achieved FAR not exceeding ``far`` (no interpolation)."""
    if not 0 < far <= 1:
        raise ValueError("far must be in (0, 1]")
    ok = curve.far <= far
    best_far = curve.far[ok].max()
    tar = curve.tar[ok & (curve.far == best_far)].max()
    return OperatingPoint(float(tar), float(best_far), far, below_resolution=far < 1.0 / curve.n_impostor)


def auc(curve: RocCurve) -> float:
    return float(np.trapezoid(curve.tar, curve.far))


# --------------------------------------------------------------------------
# baseline and fusion
# --------------------------------------------------------------------------


def template_vector(embeddings) -> np.ndarray:
    """Mean-pooled, L2-normalized template vector."""
    e = np.asarray(embeddings)
    if e.ndim != 2 or len(e) == 0:
        raise ValueError("empty template")
    return template_descriptor(e)


def baseline_similarity(t1, t2, embedder) -> float:
    """Cosine similarity of mean-pooled embeddings; ``embedder`` maps (N, H, W, 3) -> (N, D)."""
    a = np.asarray(t1.images() if hasattr(t1, "images") else t1)
    b = np.asarray(t2.images() if hasattr(t2, "images") else t2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty template")
    va, vb = template_vector(embedder(a)), template_vector(embedder(b))
    return float(np.clip(va @ vb, -1.0, 1.0))


@dataclass
class ScoreCalibration:
    """Impostor mean/std of each score stream on a held-out split."""

    baseline_mean: float
    baseline_std: float
    dcn_mean: float
    dcn_std: float

    @classmethod
    def fit(cls, baseline_impostor, dcn_impostor) -> "ScoreCalibration":
        b, d = np.asarray(baseline_impostor, float), np.asarray(dcn_impostor, float)
        return cls(float(b.mean()), float(b.std()), float(d.mean()), float(d.std()))


def _z(x, mu, sd, name):
    if not sd > 0:
        warnings.warn(f"{name} score stream has zero variance on the calibration split; using raw scores")
        return np.asarray(x, float)
    return (np.asarray(x, float) - mu) / sd


def fuse_scores(baseline, dcn, weight: float, calibration: ScoreCalibration):
    """``weight * z(baseline) + (1 - weight) * z(dcn)`` with impostor z-scoring.

    ``dcn`` is the comparator's ranking score (its same-class logit margin,
    a strictly increasing function of the same-class probability).
    """
    if not 0 <= weight <= 1:
        raise ValueError("weight must be in [0, 1]")
    zb = _z(baseline, calibration.baseline_mean, calibration.baseline_std, "baseline")
    zd = _z(dcn, calibration.dcn_mean, calibration.dcn_std, "dcn")
    out = weight * zb + (1 - weight) * zd
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# protocols
# --------------------------------------------------------------------------


def partition_templates(samples_by_identity: dict, rng: np.random.Generator, min_size: int = 1, max_size: int = 8):
    """Split each identity's samples into disjoint templates of random size."""
    templates, owners = [], []
    for ident in sorted(samples_by_identity):
        pool = list(samples_by_identity[ident])
        i = 0
        while i < len(pool):
            n = int(rng.integers(min_size, max_size + 1))
            chunk = pool[i : i + n]
            i += n
            templates.append(chunk)
            owners.append(ident)
    return templates, owners


def build_protocol(owners, n_genuine: int, n_impostor: int, rng: np.random.Generator) -> ProtocolSpec:
    owners = np.asarray(owners)
    iu, ju = np.triu_indices(len(owners), k=1)
    same = owners[iu] == owners[ju]
    gen = np.flatnonzero(same)
    imp = np.flatnonzero(~same)
    if gen.size < n_genuine or imp.size < n_impostor:
        raise ValueError(f"protocol needs {n_genuine}/{n_impostor} pairs, only {gen.size}/{imp.size} exist")
    g = np.sort(rng.choice(gen, size=n_genuine, replace=False))
    m = np.sort(rng.choice(imp, size=n_impostor, replace=False))
    pairs = [(int(iu[p]), int(ju[p]), 1) for p in g] + [(int(iu[p]), int(ju[p]), 0) for p in m]
    return ProtocolSpec(pairs, {i: int(o) for i, o in enumerate(owners)})


def write_protocol(spec: ProtocolSpec, path) -> None:
    with open(path, "w") as fh:
        fh.write("# template_a_id,template_b_id,label\n")
        for a, b, lab in spec.pairs:
            fh.write(f"{a},{b},{lab}\n")


def read_protocol(path) -> ProtocolSpec:
    pairs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        a, b, lab = line.split(",")
        if lab.strip() not in ("0", "1"):
            raise ValueError(f"bad label in protocol line {line!r}")
        pairs.append((int(a), int(b), int(lab)))
    return ProtocolSpec(pairs)


def write_metrics(path, rows: dict) -> None:
    """``rows`` maps method name -> RocCurve; one (method, far, tar) line per operating point."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "far", "tar", "achieved_far", "below_resolution"])
        for name, curve in rows.items():
            for far in FAR_POINTS:
                op = tar_at_far(curve, far)
                w.writerow([name, f"{far:g}", f"{op.tar:.6f}", f"{op.far:.6f}", int(op.below_resolution)])


def write_roc(path, rows: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "threshold", "far", "tar"])
        for name, c in rows.items():
            for t, f, r in zip(c.thresholds, c.far, c.tar):
                w.writerow([name, f"{t:.8g}", f"{f:.8f}", f"{r:.8f}"])
