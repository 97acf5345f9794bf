"""Desk-scale end-to-end run: baseline vs comparator vs fused scores."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluate import (
    ProtocolSpec,
    ScoreCalibration,
    auc,
    build_protocol,
    fuse_scores,
    partition_templates,
    roc_curve,
    tar_at_far,
    template_vector,
    write_metrics,
    write_protocol,
    write_roc,
)
from .network import BaselineParams, DCNParams, descriptor_bank, embed_images, score_descriptor_pairs
from .synth import DataConfig, Dataset, generate_dataset
from .trainer import TrainConfig, params_from_checkpoint, train, train_baseline

log = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    genuine_pairs: int = 1000
    impostor_pairs: int = 1000
    calibration_pairs: int = 2000
    fusion_weight: float = 0.5
    eval_seed: int = 11
    max_template_size: int = 8


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    regularizers: tuple = ("diversity", "keypoints")


@dataclass
class EvalSet:
    """Test templates with their protocol, plus train-identity impostors for calibration."""

    templates: list  # (N_i, H, W, 3) stacks
    protocol: ProtocolSpec
    calib_templates: list
    calib_pairs: list

    @property
    def labels(self) -> np.ndarray:
        return np.array([p[2] for p in self.protocol.pairs])


def template_images(templates) -> list:
    return [np.stack([s.image for s in t]) for t in templates]


def _split_templates(ds: Dataset, ids, rng, max_size):
    by_id = ds.by_identity()
    return partition_templates({i: by_id[i] for i in ids}, rng, 1, max_size)


def build_eval_set(ds: Dataset, cfg: EvalConfig, protocol: ProtocolSpec | None = None) -> EvalSet:
    """Partition test identities into templates of 1..max size and draw a balanced protocol.

    A supplied ``protocol`` replaces the drawn one; its template ids index
    the same seeded partition.
    """
    rng = np.random.default_rng(cfg.eval_seed)
    test_t, owners = _split_templates(ds, ds.test_ids, rng, cfg.max_template_size)
    drawn = build_protocol(owners, cfg.genuine_pairs, cfg.impostor_pairs, rng)
    if protocol is None:
        protocol = drawn
    else:
        top = max(max(a, b) for a, b, _ in protocol.pairs)
        if top >= len(test_t):
            raise ValueError(f"protocol refers to template {top}, only {len(test_t)} exist")
        protocol = ProtocolSpec(protocol.pairs, {i: int(o) for i, o in enumerate(owners)})
    protocol.check_open_set(ds.train_ids)
    calib_t, calib_owners = _split_templates(ds, ds.train_ids, rng, cfg.max_template_size)
    calib = build_protocol(calib_owners, 1, cfg.calibration_pairs, rng)
    calib_pairs = [p for p in calib.pairs if p[2] == 0]
    return EvalSet(template_images(test_t), protocol, template_images(calib_t), calib_pairs)


def _embed_templates(imgs, baseline: BaselineParams) -> list:
    emb = embed_images(np.concatenate(imgs), baseline)
    bounds = np.cumsum([0] + [len(t) for t in imgs])
    return [emb[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def baseline_scores(embeddings_per_template, pairs) -> np.ndarray:
    vecs = np.stack([template_vector(e) for e in embeddings_per_template])
    return np.array([float(np.clip(vecs[a] @ vecs[b], -1, 1)) for a, b, _ in pairs])


def score_methods(es: EvalSet, baseline: BaselineParams, comparators: dict, fusion_weight: float = 0.5) -> dict:
    """ROC curves for the baseline, each named comparator, and each fusion."""
    labels = es.labels
    base = baseline_scores(_embed_templates(es.templates, baseline), es.protocol.pairs)
    base_cal = baseline_scores(_embed_templates(es.calib_templates, baseline), es.calib_pairs)
    curves = {"baseline": roc_curve(base, labels)}
    for name, params in comparators.items():
        dcn = score_descriptor_pairs(descriptor_bank(es.templates, params), es.protocol.pairs, params)
        dcn_cal = score_descriptor_pairs(descriptor_bank(es.calib_templates, params), es.calib_pairs, params)
        calibration = ScoreCalibration.fit(base_cal, dcn_cal)
        curves[name] = roc_curve(dcn, labels)
        curves[name.replace("dcn", "fused", 1)] = roc_curve(fuse_scores(base, dcn, fusion_weight, calibration), labels)
    return curves


def summarize(curves: dict) -> dict:
    return {
        name: {
            "tar@1e-3": tar_at_far(c, 1e-3).tar,
            "tar@1e-2": tar_at_far(c, 1e-2).tar,
            "tar@1e-1": tar_at_far(c, 1e-1).tar,
            "auc": auc(c),
        }
        for name, c in curves.items()
    }


def write_outputs(out_dir, es: EvalSet, curves: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_protocol(es.protocol, out / "protocol.txt")
    write_metrics(out / "metrics.csv", curves)
    write_roc(out / "roc.csv", curves)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Baseline, then one comparator per regularizer, all scored on one protocol."""
    t0 = time.perf_counter()
    ds = generate_dataset(cfg.data)
    es = build_eval_set(ds, cfg.eval)

    log.info("training baseline")
    baseline = train_baseline(cfg.train, ds)
    timings = {"baseline": time.perf_counter() - t0}

    comparators = {}
    for reg in cfg.regularizers:
        t1 = time.perf_counter()
        tcfg = dataclasses.replace(cfg.train, regularizer=reg)
        log.info("training comparator with %s regularizer", reg)
        sub = Path(out_dir) / reg if out_dir is not None else None
        comparators[f"dcn_{reg}"] = params_from_checkpoint(train(tcfg, ds, sub, embedder=baseline))
        timings[reg] = time.perf_counter() - t1

    curves = score_methods(es, baseline, comparators, cfg.eval.fusion_weight)
    results = summarize(curves)
    results["timings"] = timings
    results["runtime_s"] = time.perf_counter() - t0
    if out_dir is not None:
        write_outputs(out_dir, es, curves)
    return results


def accepts(results: dict, regularizers=("diversity", "keypoints")) -> dict:
    """Check the desk-scale claims on a ``run_experiment`` result.

    The comparator must beat the baseline by 0.02 TAR at FAR 1e-2, fusion
    must stay within 0.01 of the better single score, and the two
    regularizer variants must land within 0.05 TAR of each other.
    """
    base = results["baseline"]["tar@1e-2"]
    checks = {}
    for reg in regularizers:
        dcn = results[f"dcn_{reg}"]["tar@1e-2"]
        fused = results[f"fused_{reg}"]["tar@1e-2"]
        checks[f"{reg}_beats_baseline"] = dcn >= base + 0.02
        checks[f"{reg}_fusion_holds"] = fused >= max(base, dcn) - 0.01
    if len(regularizers) == 2:
        a, b = (results[f"dcn_{r}"]["tar@1e-2"] for r in regularizers)
        checks["regularizers_comparable"] = abs(a - b) <= 0.05
    checks["within_30_minutes"] = results["runtime_s"] <= 30 * 60
    return checks
