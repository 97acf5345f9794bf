"""Command line entry point: gen-data, train, eval, mine-stats, viz-attention.

Configuration is resolved from dataclass defaults, then ``--config FILE``
(flat ``key = value``), then named flags, then trailing ``key=value``
overrides. The resolved values are written to ``resolved_config.txt`` in the
output directory; passing that file back via ``--config`` repeats the run.

Failures print one line ``error: <category>: <message>`` to stderr and exit
with 2 (usage), 3 (missing-file), 4 (validation) or 5 (numeric).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .attend import save_overlays
from .checkpoint import CheckpointError
from .config import ConfigError
from .detect import detect_forward
from .evaluate import read_protocol
from .experiment import EvalConfig, build_eval_set, score_methods, summarize, write_outputs
from .mining import EmbeddingStore, MiningShortageError, build_mining_round, difficulty_histogram
from .network import BaselineParams, DCNParams, embed_images
from .synth import DataConfig, export_dataset, generate_dataset, load_dataset
from .trainer import NumericalError, SamplePool, TrainConfig, blas_scope, load_params, train, train_baseline

EXIT_USAGE, EXIT_MISSING, EXIT_VALIDATION, EXIT_NUMERIC = 2, 3, 4, 5
RESOLVED = "resolved_config.txt"

log = logging.getLogger("dcn")


@dataclass
class RunConfig:
    """Paths and per-command knobs; empty strings mean 'not given'."""

    out_dir: str = "."
    identities: int = 0
    data_dir: str = ""
    checkpoint: str = ""
    baseline: str = ""
    protocol: str = ""
    template: str = ""
    bins: int = 20


CONFIG_CLASSES = (DataConfig, TrainConfig, EvalConfig, RunConfig)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--dataset-seed", dest="dataset_seed", type=int)
    p.add_argument("--train-seed", dest="train_seed", type=int)
    p.add_argument("--regularizer", choices=("diversity", "keypoints"))
    p.add_argument("--k", type=int, help="landmark channels (default 12)")
    p.add_argument("--images-per-template", dest="images_per_template", type=int, help="default 3")
    p.add_argument("--deterministic", action="store_const", const=True, default=None)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("overrides", nargs="*", metavar="key=value")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcn", description="Set-based verification with a deep comparator network")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render and export the synthetic dataset")
    _add_common(p)
    p.add_argument("--identities", type=int, help="total identities, split in the configured train:test ratio")

    p = sub.add_parser("train", help="train the baseline classifier and the comparator")
    _add_common(p)
    p.add_argument("--data", dest="data_dir", help="dataset directory from gen-data")

    p = sub.add_parser("eval", help="score a verification protocol")
    _add_common(p)
    p.add_argument("--checkpoint", help="comparator checkpoint")
    p.add_argument("--baseline", help="baseline checkpoint (default: beside --checkpoint)")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--protocol", help="pair list: template_a_id,template_b_id,label")

    p = sub.add_parser("mine-stats", help="difficulty histogram of a mining round")
    _add_common(p)
    p.add_argument("--baseline", help="baseline checkpoint (default: train one)")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--bins", type=int)

    p = sub.add_parser("viz-attention", help="write K+1 attention overlays per image")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--template", help="directory of PNGs or comma-separated PNG paths")
    return parser


# --------------------------------------------------------------------------
# config resolution
# --------------------------------------------------------------------------


def resolve(args: argparse.Namespace) -> dict:
    values = {}
    for cls in CONFIG_CLASSES:
        values.update(cfgmod.to_strings(cls()))
    known = set(values)
    if args.config:
        file_values = cfgmod.read_config(args.config)
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys in {args.config}: {', '.join(unknown)}")
        values.update(file_values)
    for key in known:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        if key.strip() not in known:
            raise ConfigError(f"unknown config key {key.strip()!r}")
        values[key.strip()] = value.strip()
    return values


def _configs(values: dict):
    data, train_cfg, eval_cfg, run = (cfgmod.from_strings(cls, values) for cls in CONFIG_CLASSES)
    train_cfg.validate()
    return data, train_cfg, eval_cfg, run


def _echo(values: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(values, out / RESOLVED)


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _dataset(data: DataConfig, run: RunConfig):
    if run.data_dir:
        return load_dataset(_require(run.data_dir, "--data"))
    return generate_dataset(data)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(values: dict) -> int:
    data, _, _, run = _configs(values)
    if run.identities:
        # keep the configured train:test ratio
        if run.identities < 2:
            raise ConfigError("--identities must be at least 2")
        share = data.test_identities / (data.train_identities + data.test_identities)
        data.test_identities = min(max(1, round(run.identities * share)), run.identities - 1)
        data.train_identities = run.identities - data.test_identities
        values["train_identities"] = str(data.train_identities)
        values["test_identities"] = str(data.test_identities)
    out = Path(run.out_dir)
    manifest = export_dataset(generate_dataset(data), out)
    _echo(values, out)
    print(f"wrote {manifest} ({data.train_identities + data.test_identities} identities)")
    return 0


def cmd_train(values: dict) -> int:
    data, tcfg, _, run = _configs(values)
    ds = _dataset(data, run)
    out = Path(run.out_dir)
    _echo(values, out)
    baseline = train_baseline(tcfg, ds)
    ckpt = train(tcfg, ds, out, embedder=baseline)
    print(f"wrote {out / 'dcn.ckpt'} and {out / 'baseline.ckpt'} after {ckpt.step} steps")
    return 0


def _baseline_path(run: RunConfig) -> str:
    if run.baseline:
        return run.baseline
    return str(Path(run.checkpoint).with_name("baseline.ckpt")) if run.checkpoint else ""


def _load_kind(path: Path, kind):
    params = load_params(path)
    if not isinstance(params, kind):
        raise ConfigError(f"{path} holds a {type(params).__name__}, expected {kind.__name__}")
    return params


def cmd_eval(values: dict) -> int:
    data, tcfg, ecfg, run = _configs(values)
    dcn = _load_kind(_require(run.checkpoint, "--checkpoint"), DCNParams)
    baseline = _load_kind(_require(_baseline_path(run), "--baseline"), BaselineParams)
    ds = _dataset(data, run)
    protocol = read_protocol(_require(run.protocol, "--protocol")) if run.protocol else None
    out = Path(run.out_dir)
    _echo(values, out)
    with blas_scope(tcfg):
        es = build_eval_set(ds, ecfg, protocol)
        curves = score_methods(es, baseline, {"dcn": dcn}, ecfg.fusion_weight)
    write_outputs(out, es, curves)
    for name, row in summarize(curves).items():
        print(f"{name}: " + " ".join(f"{k}={v:.4f}" for k, v in row.items()))
    return 0


def cmd_mine_stats(values: dict) -> int:
    data, tcfg, _, run = _configs(values)
    ds = _dataset(data, run)
    baseline = _load_kind(_require(run.baseline, "--baseline"), BaselineParams) if run.baseline else train_baseline(tcfg, ds)
    pool = SamplePool.from_dataset(ds)
    store = EmbeddingStore(embed_images(pool.images(), baseline), pool.identities)
    rng = np.random.default_rng([tcfg.train_seed, 0x3157])
    mround = build_mining_round(store, rng, tcfg.mining_identities, 2, tcfg.images_per_template)
    rows = difficulty_histogram(mround.difficulty, bins=run.bins)
    out = Path(run.out_dir)
    _echo(values, out)
    with open(out / "mine_stats.csv", "w") as fh:
        fh.write("bucket_left,bucket_right,count\n")
        for left, right, count in rows:
            fh.write(f"{left:.4f},{right:.4f},{count}\n")
    n = mround.difficulty.d.shape[0]
    print(f"wrote {out / 'mine_stats.csv'} ({n}x{n} difficulty matrix)")
    return 0


def _template_images(spec: str) -> np.ndarray:
    from PIL import Image

    if not spec:
        raise ConfigError("--template is required")
    p = Path(spec)
    paths = sorted(p.glob("*.png")) if p.is_dir() else [Path(s) for s in spec.split(",") if s]
    if not paths:
        raise ConfigError(f"no PNG images in {spec}")
    for path in paths:
        if not path.exists():
            raise FileNotFoundError(f"template image not found: {path}")
    return np.stack([np.asarray(Image.open(x).convert("RGB"), dtype=np.float32) / 255.0 for x in paths])


def cmd_viz_attention(values: dict) -> int:
    _, _, _, run = _configs(values)
    params = _load_kind(_require(run.checkpoint, "--checkpoint"), DCNParams)
    images = _template_images(run.template)
    maps = detect_forward(images, params.detect)
    out = Path(run.out_dir)
    _echo(values, out)
    paths = save_overlays(images, maps.scores.data.astype(np.float64), out)
    print(f"wrote {len(paths)} overlays ({params.k + 1} per image) to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "mine-stats": cmd_mine_stats,
    "viz-attention": cmd_viz_attention,
}


def _fail(code: int, category: str, message) -> int:
    text = " ".join(str(message).split())
    print(f"error: {category}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        values = resolve(args)
        return COMMANDS[args.command](values)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing-file", exc)
    except (NumericalError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (ValueError, CheckpointError, MiningShortageError) as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)


if __name__ == "__main__":
    sys.exit(main())
