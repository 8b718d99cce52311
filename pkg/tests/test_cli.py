import subprocess
import sys

import numpy as np
import pytest

from derainfield import cli
from derainfield import dataset as ds

TINY_TRAIN = """\
rays_per_batch=64
patch_size=8
n_coarse=8
n_fine=8
field_depth=2
field_width=16
freqs_position=3
freqs_direction=1
angle_refresh_every=20
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.cfg").write_text("size=32\ncameras=4\ndensity=10\n")
    (root / "train.cfg").write_text(TINY_TRAIN)
    assert cli.run(["generate", "--config", str(root / "scene.cfg"), "--out", str(root / "s1"), "--seed", "2"]) == 0
    code = cli.run(["train", "--config", str(root / "train.cfg"), "--data", str(root / "s1"),
                    "--out", str(root / "run1"), "--iters", "400", "--seed", "7"])
    assert code == 0
    return root


def test_generate_then_train(pipeline):
    run = pipeline / "run1"
    assert (run / "checkpoint_final.rnsc").exists()
    lines = (run / "losses.csv").read_text().splitlines()
    assert lines[0].startswith("iter,ll,rec,tv,agr,total,theta_deg") and len(lines) > 400
    manifest = (run / "manifest.txt").read_text()
    assert "command=train" in manifest and "seed=7" in manifest and "total_iters=400" in manifest
    assert "version=" in manifest
    scene = ds.load_scene(pipeline / "s1")
    assert scene.n == 4 and scene.hw == (32, 32)
    assert "seed=2" in (pipeline / "s1" / "manifest.txt").read_text()


def test_render_is_deterministic(pipeline):
    ckpt = str(pipeline / "run1" / "checkpoint_final.rnsc")
    for name in ("r1", "r2"):
        assert cli.run(["render", "--checkpoint", ckpt, "--data", str(pipeline / "s1"), "--out",
                        str(pipeline / name), "--views", "0,2"]) == 0
    files = sorted(p.name for p in (pipeline / "r1").glob("*.png"))
    assert files == ["001.png", "003.png"]
    for f in files:
        assert (pipeline / "r1" / f).read_bytes() == (pipeline / "r2" / f).read_bytes()


def test_derain_outputs(pipeline):
    out = pipeline / "derained"
    assert cli.run(["derain", "--checkpoint", str(pipeline / "run1" / "checkpoint_final.rnsc"),
                    "--data", str(pipeline / "s1"), "--out", str(out)]) == 0
    dirs = sorted(p for p in out.iterdir() if p.is_dir())
    assert len(dirs) == 4
    for d in dirs:
        assert sorted(p.name for p in d.iterdir()) == ["fused.png", "rain.png", "render.png"]


def test_evaluate_report(pipeline, capsys):
    out = pipeline / "eval"
    assert cli.run(["evaluate", "--checkpoint", str(pipeline / "run1" / "checkpoint_final.rnsc"),
                    "--data", str(pipeline / "s1"), "--out", str(out), "--threshold", "0.05"]) == 0
    text = capsys.readouterr().out
    assert "render+fusion" in text and "rainy input" in text and "threshold = 0.05" in text
    assert len((out / "report.csv").read_text().splitlines()) == 5


def test_analyze_histograms(pipeline):
    out = pipeline / "analyze"
    assert cli.run(["analyze", "--data", str(pipeline / "s1"), "--out", str(out), "--bins", "30",
                    "--k-angles", "2", "--views", "1"]) == 0
    hist = (out / "hist_002.csv").read_text().splitlines()
    assert len(hist) == 31
    angles = (out / "angles.csv").read_text().splitlines()
    assert angles[0] == "view,theta_deg" and angles[1].startswith("1,") and ";" in angles[1]


def test_resume_from_checkpoint(pipeline):
    out = pipeline / "resume"
    code = cli.run(["train", "--config", str(pipeline / "train.cfg"), "--data", str(pipeline / "s1"),
                    "--out", str(out), "--iters", "400", "--seed", "7",
                    "--checkpoint", str(pipeline / "run1" / "checkpoint_000100.rnsc")])
    assert code == 0
    assert (out / "losses.csv").read_text() == (pipeline / "run1" / "losses.csv").read_text()


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["train", "--data", "x"],
    ["render", "--data", "x", "--out", "y"],
    ["generate", "--out", "y", "--unknown-flag"],
    ["render", "--data", "x", "--out", "y", "--views", "a,b"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert cli.run(argv) == 1
    assert capsys.readouterr().err


def test_bad_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense=3\n")
    assert cli.run(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_view_out_of_range(pipeline):
    code = cli.run(["render", "--checkpoint", str(pipeline / "run1" / "checkpoint_final.rnsc"),
                    "--data", str(pipeline / "s1"), "--out", str(pipeline / "bad"), "--views", "9"])
    assert code == 1


def test_runtime_failure_exit_2(tmp_path, capsys):
    assert cli.run(["render", "--checkpoint", str(tmp_path / "missing.rnsc"), "--data", str(tmp_path),
                    "--out", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_help_and_version():
    assert cli.run(["--help"]) == 0
    assert cli.run(["--version"]) == 0


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "derainfield.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()


def test_ablate_six_rows(pipeline, capsys):
    out = pipeline / "ablate"
    code = cli.run(["ablate", "--config", str(pipeline / "train.cfg"), "--data", str(pipeline / "s1"),
                    "--out", str(out), "--iters", "12"])
    assert code == 0
    table = (out / "ablation.txt").read_text().splitlines()
    assert [line.split()[0] for line in table[1:]] == ["full", "w/o", "w/o", "w/o", "bins", "bins"]
    assert len(table) == 7
    runs = (out / "ablation_runs.csv").read_text().splitlines()
    assert len(runs) == 7
    assert table[0] in capsys.readouterr().out


def test_ablation_table_averages_seeds():
    results = []
    for name, _, _ in cli.ABLATION_ROWS:
        for seed, value in ((0, 20.0), (1, 22.0)):
            results.append({"config": name, "seed": seed, "psnr_render": value, "ssim_render": 0.5,
                            "psnr_fused": value + 1, "ssim_fused": 0.6})
    table = cli.ablation_table(results)
    assert "21.00" in table.splitlines()[1] and "22.00" in table.splitlines()[1]
    assert np.isclose(float(table.splitlines()[1].split()[1]), 21.0)
