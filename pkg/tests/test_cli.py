import pytest

from dcn.checkpoint import load_checkpoint
from dcn.cli import main
from dcn.config import read_config

TINY = [
    "samples_per_identity=8",
    "image_size=16",
    "channels=4,4,8",
    "expert_width=8",
    "max_steps=4",
    "batch_pairs=4",
    "mining_refresh=2",
    "baseline_steps=150",
    "baseline_batch=16",
    "baseline_lr=0.01",
    "genuine_pairs=8",
    "max_template_size=2",
    "impostor_pairs=10",
    "calibration_pairs=20",
]


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset plus one trained run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--identities", "9", "--dataset-seed", "5", "--out-dir", str(root / "data"), *TINY]) == 0
    code = main(
        ["train", "--data", str(root / "data"), "--deterministic", "--out-dir", str(root / "run"),
         "mining_identities=6", *TINY]
    )
    assert code == 0
    return root


def test_gen_data_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code, _ = run(capsys, "gen-data", "--identities", "14", "--dataset-seed", "7", "--out-dir", str(tmp_path / name),
                      "samples_per_identity=2")
        assert code == 0
    a = (tmp_path / "a" / "manifest.txt").read_bytes()
    assert a == (tmp_path / "b" / "manifest.txt").read_bytes()
    ids = {line.split(",")[1] for line in a.decode().splitlines()[1:]}
    assert len(ids) == 14
    resolved = read_config(tmp_path / "a" / "resolved_config.txt")
    assert resolved["train_identities"] == "10" and resolved["test_identities"] == "4"


def test_train_outputs_and_echo(workspace):
    run_dir = workspace / "run"
    for name in ("train_log.csv", "dcn.ckpt", "baseline.ckpt", "resolved_config.txt"):
        assert (run_dir / name).exists()
    cfg = read_config(run_dir / "resolved_config.txt")
    assert cfg["deterministic"] == "True" and cfg["k"] == "12"
    assert load_checkpoint(run_dir / "dcn.ckpt").meta["kind"] == "dcn"


def test_train_replays_from_echoed_config(workspace, tmp_path, capsys):
    cfg = workspace / "run" / "resolved_config.txt"
    code, _ = run(capsys, "train", "--config", str(cfg), "--out-dir", str(tmp_path))
    assert code == 0
    assert (tmp_path / "train_log.csv").read_bytes() == (workspace / "run" / "train_log.csv").read_bytes()


def test_eval_writes_metrics(workspace, tmp_path, capsys):
    code, out = run(capsys, "eval", "--checkpoint", str(workspace / "run" / "dcn.ckpt"), "--data", str(workspace / "data"),
                    "--out-dir", str(tmp_path), *TINY)
    assert code == 0, out.err
    assert "dcn:" in out.out and "fused:" in out.out
    metrics = (tmp_path / "metrics.csv").read_text().splitlines()
    assert metrics[0].startswith("method,far,tar")
    assert (tmp_path / "roc.csv").exists()
    # the written protocol can be fed back in
    code, _ = run(capsys, "eval", "--checkpoint", str(workspace / "run" / "dcn.ckpt"), "--data", str(workspace / "data"),
                  "--protocol", str(tmp_path / "protocol.txt"), "--out-dir", str(tmp_path / "again"), *TINY)
    assert code == 0
    assert (tmp_path / "again" / "metrics.csv").read_text() == (tmp_path / "metrics.csv").read_text()


def test_mine_stats_csv(workspace, tmp_path, capsys):
    code, out = run(capsys, "mine-stats", "--baseline", str(workspace / "run" / "baseline.ckpt"), "--data",
                    str(workspace / "data"), "--out-dir", str(tmp_path), "--bins", "10", "mining_identities=6", *TINY)
    assert code == 0, out.err
    rows = (tmp_path / "mine_stats.csv").read_text().splitlines()
    assert rows[0] == "bucket_left,bucket_right,count"
    assert len(rows) == 11
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == 12 * 11 // 2


def test_viz_attention_overlays(workspace, tmp_path, capsys):
    imgs = sorted((workspace / "data" / "id00000").glob("*.png"))[:2]
    code, out = run(capsys, "viz-attention", "--checkpoint", str(workspace / "run" / "dcn.ckpt"), "--template",
                    ",".join(map(str, imgs)), "--out-dir", str(tmp_path))
    assert code == 0, out.err
    assert len(list(tmp_path.glob("*.png"))) == 2 * 13


@pytest.mark.parametrize(
    "argv,code,category",
    [
        (["train", "--bogus"], 2, "usage"),
        (["nope"], 2, "usage"),
        (["train", "--precision", "16"], 2, "usage"),
        (["train", "--data", "/nonexistent/dir"], 3, "missing-file"),
        (["eval", "--checkpoint", "/nonexistent.ckpt"], 3, "missing-file"),
        (["train", "not_a_key=1"], 4, "validation"),
        (["train", "lr=abc"], 4, "validation"),
        (["train", "lr=-1"], 4, "validation"),
        (["gen-data", "--identities", "1"], 4, "validation"),
    ],
)
def test_exit_codes(argv, code, category, capsys):
    got, out = run(capsys, *argv)
    assert got == code
    lines = out.err.strip().splitlines()
    assert lines[-1].startswith(f"error: {category}: ")


def test_unknown_key_in_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nlr = 0.001\nmystery = 3\n")
    code, out = run(capsys, "train", "--config", str(cfg))
    assert code == 4 and "mystery" in out.err


def test_corrupt_checkpoint_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage!" + b"\x00" * 20)
    code, out = run(capsys, "viz-attention", "--checkpoint", str(bad), "--template", str(tmp_path))
    assert code == 4 and "magic" in out.err


def test_numeric_failure_exit_code(workspace, tmp_path, capsys):
    code, out = run(capsys, "train", "--data", str(workspace / "data"), "--out-dir", str(tmp_path), "mining_identities=6",
                    *TINY, "lr=1e30", "max_steps=30", "precision=32")
    assert code == 5, out.err
    assert out.err.strip().splitlines()[-1].startswith("error: numeric: ")


def test_flags_override_file(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("dataset_seed = 3\n")
    code, _ = run(capsys, "gen-data", "--config", str(cfg), "--dataset-seed", "4", "--identities", "3",
                  "samples_per_identity=1", "--out-dir", str(tmp_path / "o"))
    assert code == 0
    assert read_config(tmp_path / "o" / "resolved_config.txt")["dataset_seed"] == "4"
