import hashlib

import numpy as np
import pytest
from threadpoolctl import threadpool_info

from graphmamba import cli
from graphmamba.cli import main
from graphmamba.data import load_cube
from graphmamba.model import load_checkpoint
from graphmamba.ppm import PALETTE, colorize, read_ppm

FAST = ["--set", "patch_size=5", "--set", "feature_dim=8", "--set", "model_dim=16", "--set", "epochs=3"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene") / "scene.hsic"
    assert main(["synth", "--height", "14", "--width", "14", "--bands", "6", "--classes", "3", "--seed", "2", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def trained(scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", str(scene), *FAST, "--set", "train_fraction=0.3", "--out", str(out)]) == 0
    return out


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_synth_writes_loadable_cube_reproducibly(scene, tmp_path):
    cube = load_cube(scene)
    assert cube.values.shape == (14, 14, 6) and cube.n_classes == 3
    again = tmp_path / "again.hsic"
    main(["synth", "--height", "14", "--width", "14", "--bands", "6", "--classes", "3", "--seed", "2", "--out", str(again)])
    assert digest(again) == digest(scene)


def test_synth_rejects_negative_noise(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--noise", "-0.1", "--out", str(tmp_path / "x.hsic")])
    assert exc.value.code != 0
    assert "noise" in capsys.readouterr().err


def test_train_outputs(trained):
    params, config, meta = load_checkpoint(trained / "checkpoint.gmck")
    assert config.patch_size == 5 and config.bands == 6 and config.n_classes == 3
    assert meta["train_fraction"] == 0.3
    rows = (trained / "history.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss,oa" and len(rows) == 1 + 3
    assert "kappa = " in (trained / "metrics.txt").read_text()


def test_train_does_not_modify_cube(scene, tmp_path):
    before = digest(scene)
    main(["train", str(scene), *FAST, "--set", "epochs=1", "--out", str(tmp_path)])
    assert digest(scene) == before


def test_eval_is_repeatable_and_matches_train_metrics(trained, scene, tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert main(["eval", str(trained / "checkpoint.gmck"), str(scene), "--out", str(a)]) == 0
    assert main(["eval", str(trained / "checkpoint.gmck"), str(scene), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text() == (trained / "metrics.txt").read_text()


def test_eval_rejects_non_data_override(trained, scene):
    assert main(["eval", str(trained / "checkpoint.gmck"), str(scene), "--set", "epochs=2"]) == cli.EXIT_USAGE


def test_malformed_checkpoint_has_its_own_exit_code(trained, scene, tmp_path, capsys):
    bad = tmp_path / "bad.gmck"
    bad.write_bytes((trained / "checkpoint.gmck").read_bytes()[:-10])
    assert main(["eval", str(bad), str(scene)]) == cli.EXIT_CHECKPOINT
    assert "error" in capsys.readouterr().err
    bad.write_bytes(b"junk")
    assert main(["predict", str(bad), str(scene), "--out", str(tmp_path / "m.ppm")]) == cli.EXIT_CHECKPOINT


def test_error_classes_map_to_distinct_exits(scene, tmp_path):
    junk = tmp_path / "junk.hsic"
    junk.write_bytes(b"XXXX" + bytes(40))
    assert main(["train", str(junk), "--out", str(tmp_path)]) == cli.EXIT_FORMAT
    assert main(["train", str(tmp_path / "missing.hsic"), "--out", str(tmp_path)]) == cli.EXIT_IO
    assert main(["train", str(scene), "--set", "patch_size=4", "--out", str(tmp_path)]) == cli.EXIT_DIMENSION
    assert main(["train", str(scene), "--set", "bogus=1", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    codes = [cli.EXIT_USAGE, cli.EXIT_FORMAT, cli.EXIT_CHECKPOINT, cli.EXIT_DIMENSION,
             cli.EXIT_SPLIT, cli.EXIT_NONFINITE, cli.EXIT_IO]
    assert len(set(codes)) == len(codes) and 0 not in codes and 1 not in codes


def test_singleton_class_is_a_split_error(tmp_path):
    from graphmamba.data import HsiCube, save_cube

    labels = np.ones((7, 7), dtype=int)
    labels[3, 3] = 2
    path = tmp_path / "single.hsic"
    save_cube(HsiCube(np.random.default_rng(0).random((7, 7, 4)), labels, 2), path)
    assert main(["train", str(path), *FAST, "--out", str(tmp_path)]) == cli.EXIT_SPLIT


def test_predict_image_extents(trained, scene, tmp_path):
    out = tmp_path / "map.ppm"
    assert main(["predict", str(trained / "checkpoint.gmck"), str(scene), "--out", str(out)]) == 0
    img = read_ppm(out)
    assert img.shape == (14, 14, 3)
    assert (img[:2] == 0).all() and (img[:, -2:] == 0).all()
    again = tmp_path / "again.ppm"
    main(["predict", str(trained / "checkpoint.gmck"), str(scene), "--out", str(again)])
    assert digest(again) == digest(out)


def test_noiseless_training_reproduces_label_colors(tmp_path):
    scene = tmp_path / "clean.hsic"
    main(["synth", "--height", "16", "--width", "16", "--bands", "8", "--classes", "4", "--noise", "0", "--out", str(scene)])
    run = tmp_path / "run"
    args = ["--set", "patch_size=5", "--set", "feature_dim=16", "--set", "model_dim=32", "--set", "epochs=60",
            "--set", "learning_rate=0.003", "--set", "train_fraction=1.0"]
    assert main(["train", str(scene), *args, "--out", str(run)]) == 0
    out = tmp_path / "map.ppm"
    main(["predict", str(run / "checkpoint.gmck"), str(scene), "--out", str(out)])
    labels = load_cube(scene).labels
    np.testing.assert_array_equal(read_ppm(out)[2:-2, 2:-2], colorize(labels)[2:-2, 2:-2])
    assert (PALETTE[0] == 0).all()


def test_estimate_matches_checkpoint_and_lists_stages(trained, scene, tmp_path):
    out = tmp_path / "report.txt"
    assert main(["estimate", str(scene), *FAST, "--out", str(out)]) == 0
    report = dict(line.split(" = ") for line in out.read_text().splitlines() if " = " in line)
    params, _, _ = load_checkpoint(trained / "checkpoint.gmck")
    assert int(report["params"]) == params.total_size()
    for stage in ("tokenization", "graph", "attention", "fusion", "ssm"):
        assert int(report[f"flops.{stage}"]) > 0


def test_estimate_from_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[model]\nbands = 10\nclasses = 5\npatch_size = 3\n\n[train]\nbatch_size = 8\n")
    assert main(["estimate", "--config", str(cfg)]) == 0
    assert "batch = 8" in capsys.readouterr().out
    assert main(["estimate", "--config", str(cfg), "--set", "train.batch_size=4"]) == 0
    assert "batch = 4" in capsys.readouterr().out


def test_config_file_errors(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[model]\nbands = 10\nclasses = 5\nwidth = 3\n")
    assert main(["estimate", "--config", str(cfg)]) == cli.EXIT_USAGE
    cfg.write_text("[optimizer]\nlr = 1\n")
    assert main(["estimate", "--config", str(cfg)]) == cli.EXIT_USAGE
    cfg.write_text("[model]\nbands = ten\n")
    assert main(["estimate", "--config", str(cfg)]) == cli.EXIT_USAGE
    assert main(["estimate", "--set", "model.epochs=3"]) == cli.EXIT_USAGE
    assert main(["estimate", "--set", "noequals"]) == cli.EXIT_USAGE


def test_thread_cap_from_environment(monkeypatch):
    monkeypatch.setenv("GRAPHMAMBA_THREADS", "1")
    with cli._thread_limit(False):
        assert all(info["num_threads"] == 1 for info in threadpool_info())
    monkeypatch.delenv("GRAPHMAMBA_THREADS")
    with cli._thread_limit(True):
        assert all(info["num_threads"] == 1 for info in threadpool_info())
