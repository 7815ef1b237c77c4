import csv
import json

import numpy as np
import pytest

from salrefine.cli import main
from salrefine.gradcam import class_activation_map
from salrefine.imagery import graymap_to_uint8, load_graymap, load_image, save_graymap, save_tensor
from salrefine.synth import object_scene, write_blob_dataset
from salrefine.toyscorer import ToyScorer, save_checkpoint


def save_rgb(image, path):
    from PIL import Image

    Image.fromarray(np.floor(image * 255 + 0.5).astype(np.uint8)).save(path)


@pytest.fixture
def scene(tmp_path):
    image, gt, coarse = object_scene(64, rng=3)
    save_rgb(image, tmp_path / "img.png")
    save_graymap(coarse, tmp_path / "coarse.png")
    save_graymap(gt.astype(float), tmp_path / "gt.png")
    return tmp_path


@pytest.fixture
def checkpoint(tmp_path, small_model):
    path = tmp_path / "model.bin"
    save_checkpoint(small_model, path)
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_cam_from_model(scene, checkpoint, small_model):
    assert main(["cam", str(scene / "img.png"), str(scene / "cam.png"), "--model", checkpoint,
                 "--class", "3"]) == 0
    gray = load_graymap(scene / "cam.png")
    expected, _ = class_activation_map(small_model, load_image(scene / "img.png"), 3)
    np.testing.assert_array_equal(gray, graymap_to_uint8(expected) / 255.0)


def test_cam_from_tensors(scene, rng):
    save_tensor(rng.random((3, 4, 4)), scene / "f.salt")
    save_tensor(rng.standard_normal((3, 4, 4)), scene / "g.salt")
    code = main(["cam", str(scene / "img.png"), str(scene / "cam.png"),
                 "--features", str(scene / "f.salt"), "--grads", str(scene / "g.salt"), "--class", "2"])
    assert code == 0 and load_graymap(scene / "cam.png").shape == (64, 64)


def test_cam_missing_tensor_is_usage_error(scene, capsys):
    code = main(["cam", str(scene / "img.png"), str(scene / "cam.png"),
                 "--features", str(scene / "nope.salt"), "--grads", str(scene / "nope.salt")])
    assert code == 2
    assert "not found" in capsys.readouterr().err
    assert not (scene / "cam.png").exists()


def test_cam_class_out_of_range(scene, checkpoint):
    assert main(["cam", str(scene / "img.png"), str(scene / "cam.png"),
                 "--model", checkpoint, "--class", "7"]) == 2


def test_cam_corrupt_tensor(scene):
    (scene / "bad.salt").write_bytes(b"XXXX" + bytes(16))
    code = main(["cam", str(scene / "img.png"), str(scene / "cam.png"),
                 "--features", str(scene / "bad.salt"), "--grads", str(scene / "bad.salt")])
    assert code == 2


def test_refine_smoke(scene):
    code = main(["refine", str(scene / "img.png"), str(scene / "coarse.png"), str(scene / "out.png"),
                 "--superpixels", "50", "--labels-pgm", str(scene / "labels.pgm")])
    assert code == 0
    out = load_graymap(scene / "out.png")
    assert out.shape == (64, 64) and out.min() == 0.0 and out.max() == 1.0
    assert (scene / "labels.pgm").read_bytes().startswith(b"P5\n64 64\n")


def test_refine_constant_coarse_warns(scene, capsys):
    save_graymap(np.full((64, 64), 0.5), scene / "flat.png")
    code = main(["refine", str(scene / "img.png"), str(scene / "flat.png"), str(scene / "out.png")])
    assert code == 0
    assert "warning" in capsys.readouterr().err


def test_refine_size_mismatch(scene):
    save_graymap(np.zeros((10, 10)), scene / "small.png")
    assert main(["refine", str(scene / "img.png"), str(scene / "small.png"), str(scene / "o.png")]) == 2


@pytest.mark.parametrize("iterations", [1, 10])
def test_sumdemo_outputs(scene, checkpoint, iterations):
    out = scene / f"sum{iterations}"
    code = main(["sumdemo", str(scene / "img.png"), checkpoint, str(out),
                 "--iterations", str(iterations), "--class", "1"])
    assert code == 0
    assert len(list(out.glob("*.png"))) == iterations + 1
    rows = read_rows(out / "summary.csv")
    assert rows[0] == ["iteration", "class_score", "active_area_fraction"]
    assert len(rows) == iterations + 1
    areas = [float(r[2]) for r in rows[1:]]
    assert areas == sorted(areas)


def test_eval_perfect_and_json(scene, capsys):
    maps, gts = scene / "maps", scene / "gts"
    maps.mkdir()
    gts.mkdir()
    gt = load_graymap(scene / "gt.png")
    save_graymap(gt, maps / "a.png")
    save_graymap(gt, gts / "a.png")
    save_graymap(gt, maps / "lonely.png")
    code = main(["eval", str(maps), str(gts), str(scene / "report.csv"), "--json"])
    assert code == 0
    rows = read_rows(scene / "report.csv")
    assert rows[0] == ["id", "max_fbeta", "mae", "s_measure"]
    assert rows[1][0] == "a" and float(rows[1][1]) == 1.0 and float(rows[1][2]) == 0.0
    assert rows[-1][0] == "MEAN"
    assert json.loads((scene / "report.json").read_text())["skipped"] == ["lonely"]
    assert "skipped 1" in capsys.readouterr().err


def test_eval_no_matching_names(scene):
    (scene / "m").mkdir()
    (scene / "g").mkdir()
    save_graymap(np.zeros((4, 4)), scene / "m" / "a.png")
    save_graymap(np.ones((4, 4)), scene / "g" / "b.png")
    assert main(["eval", str(scene / "m"), str(scene / "g"), str(scene / "r.csv")]) == 2


def test_traintoy_zero_epochs_is_initialization(tmp_path):
    write_blob_dataset(tmp_path / "data", 3)
    (tmp_path / "data" / "unlabelled.png").write_bytes((tmp_path / "data" / "gt" / "0000_count0.png").read_bytes())
    assert main(["traintoy", str(tmp_path / "data"), "0", str(tmp_path / "m.bin"), "--seed", "4"]) == 0
    save_checkpoint(ToyScorer(random_state=4).initialize(), tmp_path / "ref.bin")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "ref.bin").read_bytes()
    assert read_rows(str(tmp_path / "m.bin") + ".loss.csv") == [["epoch", "l_cls", "l_mask", "total"]]


def test_traintoy_one_epoch(tmp_path, capsys):
    write_blob_dataset(tmp_path / "data", 6, size=32)
    (tmp_path / "data" / "notes.png").write_bytes((tmp_path / "data" / "0000_count0.png").read_bytes())
    code = main(["traintoy", str(tmp_path / "data"), "1", str(tmp_path / "m.bin"),
                 "--channels", "2", "--batch-size", "3"])
    assert code == 0
    assert "notes.png" in capsys.readouterr().err
    rows = read_rows(str(tmp_path / "m.bin") + ".loss.csv")
    assert len(rows) == 2 and rows[1][0] == "1"


def test_config_file_and_environment(scene, checkpoint, monkeypatch):
    cfg = scene / "settings.conf"
    cfg.write_text("# demo\niterations = 3\nscales = 1.0\n")
    monkeypatch.setenv("SALREFINE_CONFIG", str(cfg))
    assert main(["sumdemo", str(scene / "img.png"), checkpoint, str(scene / "env")]) == 0
    assert len(read_rows(scene / "env" / "summary.csv")) == 4
    # flags beat the config file
    assert main(["sumdemo", str(scene / "img.png"), checkpoint, str(scene / "flag"),
                 "--iterations", "2"]) == 0
    assert len(read_rows(scene / "flag" / "summary.csv")) == 3


def test_bad_config_values(scene, checkpoint):
    bad = scene / "bad.conf"
    bad.write_text("nonsense = 1\n")
    assert main(["sumdemo", str(scene / "img.png"), checkpoint, str(scene / "x"),
                 "--config", str(bad)]) == 2
    assert main(["sumdemo", str(scene / "img.png"), checkpoint, str(scene / "x"),
                 "--sigma", "1.5"]) == 2


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
