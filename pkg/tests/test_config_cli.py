import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image as PILImage

from mcblock import cli, config
from mcblock.image_core import Image, save_image
from mcblock.mctree import MCForest

GOLDEN = Path(__file__).parent / "golden" / "metrics_composite32.csv"
GOLDEN_ARGS = ["--image", "composite:32", "--strategy", "mcblock", "--iterations", "20",
               "--batch-size", "64", "--checkpoint-every", "10", "--seed", "0"]


def train(tmp_path, *extra):
    out = tmp_path / "out"
    code = cli.main(["train", "--output-dir", str(out), *extra])
    return code, out


# -- config -----------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = config.Config(image="x.png", strategies=("random", "active", "mcblock-wo_init"),
                        iterations=7, learning_rate=0.125, eps_L=0.3, output_dir="somewhere")
    config.save(cfg, tmp_path / "c.txt")
    assert config.load(tmp_path / "c.txt") == cfg


def test_config_parse_comments_and_errors():
    cfg = config.parse("# header\n\niterations = 5  # trailing\nlam=10\n")
    assert cfg.iterations == 5 and cfg.lam == 10.0
    with pytest.raises(ValueError, match="<config>:1"):
        config.parse("bogus = 1")
    with pytest.raises(ValueError, match="duplicate"):
        config.parse("seed = 1\nseed = 2")
    with pytest.raises(ValueError, match="expected int"):
        config.parse("iterations = many")
    with pytest.raises(ValueError, match="key = value"):
        config.parse("iterations 5")
    with pytest.raises(ValueError):
        config.parse("strategy = warp")
    with pytest.raises(ValueError):
        config.parse("learning_rate = -1")


def test_command_line_overrides_file(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("iterations = 5\nseed = 9\n")
    args = cli.build_parser().parse_args(["train", "--config", str(path), "--seed", "4"])
    cfg = cli.resolve_config(args)
    assert (cfg.iterations, cfg.seed) == (5, 4)


def test_output_dir_env(monkeypatch):
    monkeypatch.setenv(config.OUTPUT_DIR_ENV, "/tmp/from-env")
    assert config.Config().output_dir == "/tmp/from-env"
    monkeypatch.delenv(config.OUTPUT_DIR_ENV)
    assert config.Config().output_dir == config.DEFAULT_OUTPUT_DIR


def test_env_output_dir_used_by_train(tmp_path, monkeypatch):
    monkeypatch.setenv(config.OUTPUT_DIR_ENV, str(tmp_path / "envout"))
    assert cli.main(["train", "--image", "composite:16", "--iterations", "0"]) == 0
    assert (tmp_path / "envout" / "metrics.csv").is_file()


# -- train ------------------------------------------------------------------------

def test_missing_image_fails_with_path(tmp_path, capsys):
    code, _ = train(tmp_path, "--image", str(tmp_path / "nope.png"))
    assert code != 0
    assert "nope.png" in capsys.readouterr().err


def test_missing_image_exit_code_subprocess(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mcblock", "train", "--image",
                           str(tmp_path / "absent.png"), "--output-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode != 0
    assert "absent.png" in proc.stderr


def test_zero_iteration_train_writes_artifacts(tmp_path):
    code, out = train(tmp_path, "--image", "composite:16", "--iterations", "0")
    assert code == 0
    for name in ("config.txt", "metrics.csv", "timing.csv", "reconstruction_block.png",
                 "reconstruction_pixel.png", "partition.png", "heatmap.png",
                 "sample_counts.npy", "field.mipf", "forest.json"):
        assert (out / name).is_file(), name
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].split(",")[2] == "0"
    with PILImage.open(out / "partition.png") as im:
        assert im.size == (16, 16)


def test_train_from_png(tmp_path, rng):
    src = tmp_path / "in.png"
    save_image(Image(rng.random((12, 20, 3))), src)
    code, out = train(tmp_path, "--image", str(src), "--iterations", "3",
                      "--batch-size", "16", "--strategy", "active")
    assert code == 0
    assert not (out / "forest.json").exists()
    with PILImage.open(out / "reconstruction_pixel.png") as im:
        assert im.size == (20, 12)


def test_metrics_csv_matches_golden(tmp_path):
    code, out = train(tmp_path, *GOLDEN_ARGS)
    assert code == 0
    assert (out / "metrics.csv").read_bytes() == GOLDEN.read_bytes()


def test_bench_writes_summary(tmp_path, capsys):
    out = tmp_path / "b"
    code = cli.main(["bench", "--image", "composite:16", "--iterations", "10",
                     "--batch-size", "32", "--checkpoint-every", "5", "--target-psnr", "5",
                     "--strategies", "random,mcblock", "--output-dir", str(out)])
    assert code == 0
    rows = (out / "summary.csv").read_text().splitlines()
    assert rows[0] == ",".join(cli.SUMMARY_HEADER)
    assert [r.split(",")[0] for r in rows[1:]] == ["random", "mcblock"]
    assert "speedup" in capsys.readouterr().out


# -- visualize --------------------------------------------------------------------

def test_edge_mask_single_block_is_border():
    m = cli.edge_mask(np.array([[0, 0, 5, 4]]), 4, 5)
    expect = np.zeros((4, 5), bool)
    expect[0, :] = expect[-1, :] = expect[:, 0] = expect[:, -1] = True
    assert np.array_equal(m, expect)


def test_edge_mask_matches_leaf_borders(rng):
    f = MCForest()
    f.add_image(Image(rng.random((16, 16, 3)) * (rng.random((16, 16, 1)) > 0.7)))
    rects = f.rects(f.leaf_indices())
    expect = np.zeros((16, 16), bool)
    for x, y, w, h in rects.tolist():
        expect[y, x:x + w] = expect[y + h - 1, x:x + w] = True
        expect[y:y + h, x] = expect[y:y + h, x + w - 1] = True
    assert np.array_equal(cli.edge_mask(rects, 16, 16), expect)


def test_heatmap_is_monotone():
    img = cli.heatmap_image(np.arange(12.0).reshape(3, 4))
    lum = img.data.sum(axis=2).ravel()
    assert np.all(np.diff(lum) > 0)
    assert np.all(cli.heatmap_image(np.zeros((2, 2))).data == cli.heatmap_image(np.zeros((2, 2))).data[0, 0])


def test_visualize_after_train(tmp_path):
    code, out = train(tmp_path, "--image", "composite:32", "--iterations", "5", "--batch-size", "32")
    assert code == 0
    vis = tmp_path / "vis"
    code = cli.main(["visualize", "--image", "composite:32", "--forest", str(out / "forest.json"),
                     "--counts", str(out / "sample_counts.npy"), "--field", str(out / "field.mipf"),
                     "--output-dir", str(vis)])
    assert code == 0
    for name in ("partition.png", "heatmap.png", "reconstruction_block.png"):
        assert (vis / name).is_file()
    a = np.asarray(PILImage.open(out / "partition.png"))
    b = np.asarray(PILImage.open(vis / "partition.png"))
    assert np.array_equal(a, b)


def test_visualize_rejects_mismatch_and_corruption(tmp_path, capsys):
    code, out = train(tmp_path, "--image", "composite:32", "--iterations", "0")
    assert code == 0
    base = ["visualize", "--output-dir", str(tmp_path / "v")]
    assert cli.main(base + ["--image", "composite:16", "--forest", str(out / "forest.json")]) != 0
    assert "image is 16x16" in capsys.readouterr().err
    np.save(tmp_path / "bad_counts.npy", np.zeros((3, 3)))
    assert cli.main(base + ["--image", "composite:32", "--forest", str(out / "forest.json"),
                            "--counts", str(tmp_path / "bad_counts.npy")]) != 0
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"format": "x"})[:-3])
    assert cli.main(base + ["--image", "composite:32", "--forest", str(broken)]) != 0
    garbage = tmp_path / "garbage.mipf"
    garbage.write_bytes(b"\x00" * 10)
    assert cli.main(base + ["--image", "composite:32", "--forest", str(out / "forest.json"),
                            "--field", str(garbage)]) != 0
