import json

import numpy as np
import pytest

from ncrf import cli
from ncrf import numerics as nx
from ncrf.crf import crf_loss
from ncrf.detect import Detection, ProbabilityMap, write_detections
from ncrf.extractor import CRF_WEIGHT, predict_marginals
from ncrf.slides import write_pgm

TINY = {
    "patch": 8, "channels": [4, 8], "n_pos": 20, "n_neg": 20, "n_valid_pos": 10, "n_valid_neg": 10,
    "batch_size": 10, "epochs": 1, "T": 3, "lr": 0.01, "n_slides": 3, "split_ratio": [1, 1, 1],
    "slide": {"width": 768, "height": 768, "tumor_radius": [0.1, 0.15]}, "stride": 32,
}


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, config):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--config", str(config), "--seed", "0", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, config, dataset):
    runs = {}
    for arm, extra in (("ncrf", []), ("baseline", ["--no-crf"])):
        out = tmp_path_factory.mktemp(arm)
        assert cli.main(["train", "--config", str(config), "--data", str(dataset), "--seed", "0", "--out", str(out)]
                        + extra) == 0
        runs[arm] = out
    return runs


def test_synth_deterministic(tmp_path, config, dataset):
    assert cli.main(["synth", "--config", str(config), "--seed", "0", "--out", str(tmp_path)]) == 0
    for f in dataset.iterdir():
        if f.name != "config.json":
            assert f.read_bytes() == (tmp_path / f.name).read_bytes()
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert sorted(e["split"] for e in manifest["slides"]) == ["test", "train", "valid"]
    assert json.loads((dataset / "config.json").read_text())["config_hash"]


def test_synth_zero_slides(tmp_path, config):
    assert cli.main(["synth", "--config", str(config), "--set", "n_slides=0", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["slides"] == []


def test_train_outputs(trained):
    for out in trained.values():
        assert (out / "model.ncrf").exists() and (out / "metrics.csv").exists()
        assert json.loads((out / "config.json").read_text())["config_hash"]


def test_infer_detect_froc_pipeline(tmp_path, config, dataset, trained, capsys):
    maps = tmp_path / "maps"
    assert cli.main(["infer", "--config", str(config), "--checkpoint", str(trained["ncrf"] / "model.ncrf"),
                     "--data", str(dataset), "--out", str(maps)]) == 0
    csv_path = maps / "slide_002_map.csv"
    first = csv_path.read_bytes()
    assert cli.main(["infer", "--config", str(config), "--checkpoint", str(trained["ncrf"] / "model.ncrf"),
                     "--slide", str(dataset / "slide_002.pgm"), "--out", str(maps)]) == 0
    assert csv_path.read_bytes() == first
    assert (maps / "slide_002_map.pgm").exists()

    dets = tmp_path / "dets"
    assert cli.main(["detect", "--config", str(config), "--set", "prob_floor=0.0", "--map", str(csv_path),
                     "--out", str(dets)]) == 0
    assert (dets / "slide_002_detections.csv").read_text().startswith("x,y,prob")
    capsys.readouterr()
    code = cli.main(["froc", "--config", str(config), "--detections", str(dets / "slide_002_detections.csv"),
                     "--mask", str(dataset / "slide_002_mask.pgm"), "--out", str(tmp_path / "froc")])
    assert code == 0
    assert "average FROC" in capsys.readouterr().out
    assert (tmp_path / "froc" / "froc.csv").read_text().splitlines()[-1].startswith("# average_froc=")


def test_infer_refuses_baseline_checkpoint(tmp_path, config, dataset, trained, capsys):
    code = cli.main(["infer", "--config", str(config), "--checkpoint", str(trained["baseline"] / "model.ncrf"),
                     "--slide", str(dataset / "slide_002.pgm"), "--out", str(tmp_path)])
    assert code == 2
    assert "no 'crf.w' entry" in capsys.readouterr().err
    assert cli.main(["infer", "--config", str(config), "--no-crf", "--checkpoint",
                     str(trained["baseline"] / "model.ncrf"), "--slide", str(dataset / "slide_002.pgm"),
                     "--out", str(tmp_path)]) == 0


def test_infer_stride_as_large_as_slide(tmp_path, config, dataset, trained):
    assert cli.main(["infer", "--config", str(config), "--set", "stride=768", "--checkpoint",
                     str(trained["ncrf"] / "model.ncrf"), "--slide", str(dataset / "slide_000.pgm"),
                     "--out", str(tmp_path)]) == 0
    assert ProbabilityMap.read_csv(tmp_path / "slide_000_map.csv").evaluated.sum() <= 1


def _fixture_files(tmp_path, detections):
    mask = np.zeros((100, 100), bool)
    mask[10:20, 10:20] = True
    mask[60:80, 60:80] = True
    write_pgm(tmp_path / "mask.pgm", mask)
    write_detections(tmp_path / "d.csv", detections)
    return ["--detections", str(tmp_path / "d.csv"), "--mask", str(tmp_path / "mask.pgm"), "--out", str(tmp_path)]


def test_froc_fixture_half(tmp_path, capsys):
    assert cli.main(["froc"] + _fixture_files(tmp_path, [Detection(15, 15, 0.9)])) == 0
    assert "average FROC 0.5000" in capsys.readouterr().out


def test_froc_fixture_perfect(tmp_path, capsys):
    assert cli.main(["froc"] + _fixture_files(tmp_path, [Detection(15, 15, 0.9), Detection(70, 70, 0.6)])) == 0
    assert "average FROC 1.0000" in capsys.readouterr().out


def test_empty_map_to_froc_error(tmp_path, capsys):
    (tmp_path / "empty_map.csv").write_text("cell_x,cell_y,prob\n")
    assert cli.main(["detect", "--map", str(tmp_path / "empty_map.csv"), "--out", str(tmp_path)]) == 0
    code = cli.main(["froc", "--detections", str(tmp_path / "empty_detections.csv"), "--mask",
                     str(_fixture_files(tmp_path, [])[3]), "--out", str(tmp_path)])
    assert code == 2
    assert "zero lesions or detections" in capsys.readouterr().err


def test_malformed_csv_reports_line(tmp_path, capsys):
    (tmp_path / "bad_map.csv").write_text("cell_x,cell_y,prob\n0,0,0.5\n1,x,0.2\n")
    assert cli.main(["detect", "--map", str(tmp_path / "bad_map.csv"), "--out", str(tmp_path)]) == 2
    assert "bad_map.csv:3" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 3


def test_gradcheck_identical_patches_zero_w_gradient(tmp_path):
    assert cli.main(["gradcheck", "--seed", "2", "--identical", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["w_grad_max_abs"] == 0.0


def test_gradient_of_unused_parameter_is_zero():
    params, x, y = cli.gradcheck_instance(cli.RunConfig(), seed=5)
    with nx.precision("f64"), nx.GradientTape() as tape:
        loss = crf_loss(predict_marginals(x, params, crf_enabled=False), y)
    (gw,) = tape.gradient(loss, [params[CRF_WEIGHT]])
    assert np.all(gw == 0.0)


def test_bad_override_and_missing_out(tmp_path, capsys):
    assert cli.main(["synth", "--set", "no_such_key=1", "--out", str(tmp_path)]) == 2
    assert "unknown configuration key" in capsys.readouterr().err
    assert cli.main(["synth"]) == 2


def test_full_scale_config_accepted(tmp_path):
    cfg = cli.build_config(cli.build_parser().parse_args(["infer", "--checkpoint", "x", "--set", "patch=256",
                                                          "--set", "stride=64"]))
    assert cfg.architecture().patch == 256 and cfg.footprint == 768
