import json
import time

import numpy as np
import pytest

from dwfiber import __version__
from dwfiber.cli import main
from dwfiber.nifti import load_nifti

PROTOCOL = {"n_directions": 30, "bvalue": 2000.0, "n_b0": 2}
DICTIONARY = {"m": 60, "seed": 0}


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """simulate -> train (voxel and neighborhood) shared by the smoke tests."""
    root = tmp_path_factory.mktemp("cli")
    t0 = time.perf_counter()
    sim = write_cfg(root / "sim.json", {"protocol": PROTOCOL, "dictionary": DICTIONARY,
                                        "synth": {"count": 300}, "volume": {"shape": [5, 5, 5]}})
    assert main(["simulate", "--config", sim, "--out", str(root / "data")]) == 0
    sim_patch = write_cfg(root / "simp.json", {"protocol": PROTOCOL, "dictionary": DICTIONARY,
                                               "synth": {"count": 100, "store": "patch"}})
    assert main(["simulate", "--config", sim_patch, "--out", str(root / "data_patch")]) == 0
    tr = write_cfg(root / "train.json", {"layer_dims": [30, 32, 60], "output_activation": "tanh",
                                         "train": {"epochs": 3, "batch_size": 32, "learning_rate": 1e-3}})
    assert main(["train", "--config", tr, "--dataset", str(root / "data"), "--out", str(root / "model")]) == 0
    trn = write_cfg(root / "trainn.json", {"layer_dims": [810, 16, 60], "mode": "neighborhood",
                                           "train": {"epochs": 2, "batch_size": 32}})
    assert main(["train", "--config", trn, "--dataset", str(root / "data_patch"),
                 "--out", str(root / "model_nbh")]) == 0
    return root, time.perf_counter() - t0


def test_simulate_outputs(workspace):
    root, _ = workspace
    d = root / "data"
    for name in ("manifest.json", "signals.bin", "labels.bin", "dictionary.json", "protocol.bvals",
                 "protocol.bvecs", "dwi.nii", "dwi_truth.json", "run.json"):
        assert (d / name).exists(), name
    run = json.loads((d / "run.json").read_text())
    assert run["version"] == __version__ and run["config"]["synth"]["count"] == 300
    assert load_nifti(d / "dwi.nii").data.shape == (5, 5, 5, 32)


def test_simulate_byte_identical(workspace, tmp_path):
    root, _ = workspace
    sim = str(root / "sim.json")
    assert main(["simulate", "--config", sim, "--out", str(tmp_path / "again")]) == 0
    for name in ("signals.bin", "labels.bin", "dwi.nii", "dwi_truth.json", "manifest.json"):
        assert (tmp_path / "again" / name).read_bytes() == (root / "data" / name).read_bytes(), name


def test_train_outputs(workspace):
    root, _ = workspace
    for name in ("manifest.json", "weights.bin", "dictionary.json", "history.csv", "loss.png", "run.json"):
        assert (root / "model" / name).exists(), name
    assert (root / "model" / "history.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,seconds"


def test_predict_voxel_and_neighborhood(workspace, capsys):
    root, _ = workspace
    d = root / "data"
    common = ["--in", str(d / "dwi.nii"), "--bvals", str(d / "protocol.bvals"), "--bvecs", str(d / "protocol.bvecs")]
    assert main(["predict", "--model", str(root / "model"), "--out", str(root / "pred"), "--threads", "1"]
                + common) == 0
    coeffs = load_nifti(root / "pred" / "coefficients.nii")
    assert coeffs.data.shape == (5, 5, 5, 60) and coeffs.data.min() >= 0
    assert len((root / "pred" / "peaks.txt").read_text().splitlines()) == 1 + 125
    assert main(["predict", "--model", str(root / "model_nbh"), "--out", str(root / "pred_n")] + common) == 0
    assert json.loads((root / "pred_n" / "run.json").read_text())["mode"] == "neighborhood"
    assert main(["predict", "--model", str(root / "model"), "--mode", "neighborhood",
                 "--out", str(root / "bad")] + common) == 2


def test_baseline_nnls(workspace):
    root, _ = workspace
    d = root / "data"
    cfg = write_cfg(root / "nnls.json", {"dictionary": DICTIONARY})
    assert main(["baseline-nnls", "--config", cfg, "--in", str(d / "dwi.nii"), "--bvals", str(d / "protocol.bvals"),
                 "--bvecs", str(d / "protocol.bvecs"), "--out", str(root / "nnls")]) == 0
    c = load_nifti(root / "nnls" / "coefficients.nii").data
    np.testing.assert_allclose(c.sum(axis=-1), 1, atol=1e-5)


def test_eval(workspace):
    root, _ = workspace
    cfg = write_cfg(root / "eval.json", {"test": {"count": 20}})
    assert main(["eval", "--config", cfg, "--model", str(root / "model"), "--out", str(root / "ev")]) == 0
    rows = json.loads((root / "ev" / "summary.json").read_text())
    assert [r["method"] for r in rows] == ["mlp", "nnls"]
    assert len((root / "ev" / "per_voxel.csv").read_text().splitlines()) == 1 + 40


def test_heatmap(workspace):
    root, _ = workspace
    cfg = write_cfg(root / "hm.json", {"heatmap": {"k_noise": 2}})
    assert main(["heatmap", "--config", cfg, "--model", str(root / "model"), "--grid", "coarse",
                 "--out", str(root / "hm")]) == 0
    for name in ("heatmap.csv", "heatmap.svg", "heatmap.png"):
        assert (root / "hm" / name).exists()
    rows = [l for l in (root / "hm" / "heatmap.csv").read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == 1 + 16
    cfg = write_cfg(root / "hmn.json", {"heatmap": {"k_noise": 1}, "protocol": PROTOCOL, "dictionary": DICTIONARY})
    assert main(["heatmap", "--config", cfg, "--method", "nnls", "--grid", "coarse", "--out", str(root / "hmn")]) == 0


def test_sweep(workspace):
    root, _ = workspace
    cfg = write_cfg(root / "sw.json", {"repeats": 1, "epochs": 2, "presets": ["mse-tanh-adam"]})
    assert main(["sweep", "--config", cfg, "--dataset", str(root / "data"), "--out", str(root / "sw")]) == 0
    runs = json.loads((root / "sw" / "runs.json").read_text())
    assert [r["preset"] for r in runs] == ["mse-tanh-adam", "control-zero-lr"]
    assert (root / "sw" / "val_loss.png").exists() and (root / "sw" / "val_loss.svg").exists()


def test_dict(tmp_path, capsys):
    assert main(["dict", "--out", str(tmp_path / "d")]) == 0
    stats = json.loads((tmp_path / "d" / "stats.json").read_text())
    assert stats["m"] == 362 and stats["max_nn_angle_deg"] <= 12


def test_smoke_budget(workspace):
    _, seconds = workspace
    assert seconds < 60


@pytest.mark.parametrize("payload,fragment", [
    ({"synth": {"cuont": 3}}, "synth.cuont"),
    ({"bogus": 1}, "bogus"),
    ({"synth": {"count": 0}}, "count"),
])
def test_config_errors_exit_2(tmp_path, capsys, payload, fragment):
    cfg = write_cfg(tmp_path / "c.json", payload)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert fragment in capsys.readouterr().err


def test_malformed_json(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{\n  \"seed\": ,\n}")
    assert main(["dict", "--config", str(tmp_path / "c.json")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_missing_required(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "m")]) == 2
    assert "dataset" in capsys.readouterr().err


def test_runtime_error_exit_1(tmp_path):
    assert main(["predict", "--model", str(tmp_path / "nope"), "--in", "x.nii", "--bvals", "b", "--bvecs", "v",
                 "--out", str(tmp_path / "o")]) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert __version__ in out and "model format" in out
