import subprocess
import sys

import numpy as np
import pytest

from csvt.cli import main
from csvt.data import read_manifest
from csvt.metrics import decode_pgm
from csvt.tensor.checkpoint import load

TINY = """\
preset = desk
model.image_size = 16
model.patch_size = 4
model.embed_dim = 8
model.num_layers = 2
model.num_heads = 2
synth.image_size = 16
synth.samples_per_class = 5
ssl.epochs = 1
ssl.batch_size = 4
ssl.warmup_epochs = 1
ssl.global_size = 16
ssl.local_size = 8
ssl.local_views = 2
ssl.head_hidden = 16
ssl.head_bottleneck = 8
ssl.head_out = 12
finetune.epochs = 1
finetune.batch_size = 4
finetune.warmup_epochs = 1
eval.batch_size = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["--config", str(cfg), "synth-data", "--out", str(root / "data")]) == 0
    return root, cfg


def run(cfg, *args):
    return main(["--config", str(cfg), *map(str, args)])


def test_synth_data_writes_manifest(workspace):
    root, _ = workspace
    recs = read_manifest(root / "data" / "manifest.csv")
    assert len(recs) == 20
    assert {r.fold for r in recs} == set(range(5))


def test_synth_spec_file(tmp_path, workspace):
    _, cfg = workspace
    (tmp_path / "spec.txt").write_text("samples_per_class = 2\nsynth.noise = 0.0\n")
    assert run(cfg, "synth-data", "--spec", tmp_path / "spec.txt", "--out", tmp_path / "d",
               "--format", "ppm") == 0
    assert len(list((tmp_path / "d").rglob("*.ppm"))) == 8
    (tmp_path / "bad.txt").write_text("model.embed_dim = 16\n")
    assert run(cfg, "synth-data", "--spec", tmp_path / "bad.txt", "--out", tmp_path / "e") == 1


def test_pretrain_finetune_eval_attnmap(workspace, tmp_path):
    root, cfg = workspace
    manifest = root / "data" / "manifest.csv"
    ssl = tmp_path / "ssl.ckpt"
    assert run(cfg, "pretrain", "--data", manifest, "--out", ssl) == 0
    assert (tmp_path / "ssl.ckpt.loss.csv").exists()
    ft = tmp_path / "ft.ckpt"
    assert run(cfg, "finetune", "--manifest", manifest, "--out", ft, "--init", ssl) == 0
    assert "head.weight" in load(ft)
    rows = (tmp_path / "ft.ckpt.metrics.csv").read_text().splitlines()
    assert rows[0] == "fold,class,precision,recall,f1,flagged" and len(rows) == 7
    assert (tmp_path / "ft.ckpt.train.csv").exists()
    out = tmp_path / "eval.csv"
    assert run(cfg, "eval", "--ckpt", ft, "--data", manifest, "--fold", 0, "--out", out) == 0
    assert out.read_text() == (tmp_path / "ft.ckpt.metrics.csv").read_text()
    image = sorted((root / "data" / "control").iterdir())[0]
    pgm = tmp_path / "map.pgm"
    assert run(cfg, "attnmap", "--ckpt", ft, "--image", image, "--out", pgm) == 0
    assert decode_pgm(pgm.read_bytes()).shape == (16, 16)
    assert run(cfg, "attnmap", "--ckpt", ft, "--image", image, "--out", pgm, "--grid") == 0
    assert decode_pgm(pgm.read_bytes()).shape == (4, 4)
    # eval needs the classifier head, which an SSL checkpoint lacks
    assert run(cfg, "eval", "--ckpt", ssl, "--data", manifest, "--out", out) == 1


def test_cross_validation(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "cv.ckpt"
    assert run(cfg, "finetune", "--data", root / "data" / "manifest.csv", "--out", out,
               "--fold", "all") == 0
    lines = (tmp_path / "cv.ckpt.metrics.csv").read_text().splitlines()
    assert lines[-1].startswith("mean,accuracy,")
    assert len(list(tmp_path.glob("cv.fold*.ckpt"))) == 5


def test_init_shape_mismatch_is_reported(workspace, tmp_path):
    root, cfg = workspace
    ssl = tmp_path / "ssl.ckpt"
    assert run(cfg, "pretrain", "--data", root / "data" / "manifest.csv", "--out", ssl) == 0
    other = tmp_path / "wide.cfg"
    other.write_text(TINY.replace("model.embed_dim = 8", "model.embed_dim = 12"))
    assert run(other, "finetune", "--data", root / "data" / "manifest.csv", "--out",
               tmp_path / "x.ckpt", "--init", ssl) == 1


def test_bench_no_timing(workspace, tmp_path):
    _, cfg = workspace
    out = tmp_path / "bench.csv"
    assert run(cfg, "bench", "--sizes", 16, 32, 48, 64, "--no-timing", "--out", out) == 0
    assert len(out.read_text().splitlines()) == 9
    assert (tmp_path / "bench.fit.csv").exists() and (tmp_path / "bench.dat").exists()


def test_f64_runs_are_bit_identical(workspace, tmp_path):
    root, cfg = workspace
    manifest = root / "data" / "manifest.csv"
    outputs = []
    for i in range(2):
        d = tmp_path / str(i)
        flags = ["--precision", "f64", "--threads", "1", "--seed", "3"]
        assert main(["--config", str(cfg), *flags, "pretrain", "--data", str(manifest),
                     "--out", str(d / "s.ckpt")]) == 0
        assert main(["--config", str(cfg), "finetune", *flags, "--data", str(manifest),
                     "--out", str(d / "f.ckpt"), "--init", str(d / "s.ckpt")]) == 0
        outputs.append([(d / n).read_bytes() for n in
                        ("s.ckpt.loss.csv", "f.ckpt.train.csv", "f.ckpt.metrics.csv", "f.ckpt")])
    assert outputs[0] == outputs[1]


def test_seed_changes_output(workspace, tmp_path):
    root, cfg = workspace
    manifest = root / "data" / "manifest.csv"
    logs = []
    for seed in (0, 1):
        out = tmp_path / f"s{seed}.ckpt"
        assert run(cfg, "--seed", seed, "pretrain", "--data", manifest, "--out", out) == 0
        logs.append((tmp_path / f"s{seed}.ckpt.loss.csv").read_text())
    assert logs[0] != logs[1]


def test_usage_errors(workspace, capsys):
    _, cfg = workspace
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["--precision", "f16", "bench"])
    assert main(["--config", "no-such-preset", "bench"]) == 2
    assert run(cfg, "pretrain", "--out", "x.ckpt") == 1
    assert "manifest is required" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "csvt.cli", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    for cmd in ("synth-data", "pretrain", "finetune", "eval", "bench", "attnmap"):
        assert cmd in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "csvt.cli", "bench", "--nope"],
                          capture_output=True, text=True)
    assert proc.returncode != 0
