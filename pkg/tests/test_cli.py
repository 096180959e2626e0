import csv
import json
import re
from pathlib import Path

import numpy as np
import pytest

from conftest import tiny_config
from hybridmesh.cli import main
from hybridmesh.data import PhantomDataset
from hybridmesh.evaluation import evaluate_predictions
from hybridmesh.data.templates import load_template
from hybridmesh.mesh.io import read_ply, read_tetgen

ASSETS = Path(__file__).parent / "assets"


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("cli") / "run"
    cfg_path = run.parent / "tiny.ini"
    cfg_path.write_text(tiny_config(tiny_dataset.root, run).to_ini())
    assert main(["train", "--config", str(cfg_path)]) == 0
    return run, cfg_path


def test_generate_counts_and_reproducibility(tmp_path, capsys):
    assert main(["generate", "--count", "2", "--seed", "4", "--out", str(tmp_path / "a"), "--workers", "1"]) == 0
    assert "4 samples" in capsys.readouterr().out
    a = PhantomDataset.open(tmp_path / "a", verify=True)
    samples = [p for p in (tmp_path / "a" / "subjects").glob("*/*") if p.is_dir()]
    assert len(samples) == 4
    assert main(["generate", "--count", "2", "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    assert PhantomDataset.open(tmp_path / "b").manifest["hashes"] == a.manifest["hashes"]


def test_generate_refuses_nonempty_dir(tmp_path, capsys):
    (tmp_path / "junk").write_text("x")
    assert main(["generate", "--count", "1", "--out", str(tmp_path)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["generate", "--count", "1", "--out", str(tmp_path), "--force"]) == 0


def test_generate_tetra_writes_node_ele(tmp_path):
    assert main(["generate", "--count", "1", "--template", "tetra", "--out", str(tmp_path)]) == 0
    d = tmp_path / "subjects" / "S0000" / "ED"
    assert (d / "gt.node").is_file() and (d / "gt.ele").is_file() and not (d / "gt.ply").exists()
    coords, tets = read_tetgen(d / "gt")
    assert coords.shape == (1101, 3) and len(tets) == len(load_template("tetra").topology.tetras)


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["generate", "--count", "x", "--out", "o"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["quality", "--out", "o"]) == 1


def test_train_outputs(trained):
    run, _ = trained
    assert len(list((run / "checkpoints").glob("*.ckpt"))) == 2
    assert (run / "config.ini").is_file() and (run / "run.json").is_file()
    assert len(_csv(run / "train_log.csv")) == 4


def test_train_resume_and_mismatch(trained, tiny_dataset, tmp_path):
    run, cfg_path = trained
    assert main(["train", "--config", str(cfg_path), "--mode", "single", "--out", str(tmp_path / "r"),
                 "--resume", str(run)]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text(cfg_path.read_text().replace(f"path = {tiny_dataset.root}", "path = /nonexistent/data"))
    assert main(["train", "--config", str(bad)]) == 2


def test_predict_is_deterministic_and_fast(trained, tmp_path, capsys):
    run, _ = trained
    outs = []
    for name in ("p1", "p2"):
        assert main(["predict", "--checkpoint", str(run), "--subject", "S0000", "--out", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    text = capsys.readouterr().out
    times = [float(t) for t in re.findall(r"forward pass ([0-9.]+) s", text)]
    assert len(times) == 4 and max(times) < 1.0
    for phase in ("ED", "ES"):
        a, b = (o / f"S0000_{phase}.ply" for o in outs)
        assert a.read_bytes() == b.read_bytes()
        coords, faces = read_ply(a)
        assert coords.shape == (810, 3)
        # mm space: the prediction sits near the heart, not in the unit cube
        assert np.ptp(coords, axis=0).max() > 5


def test_predict_errors(trained, tiny_tetra_dataset, tmp_path):
    run, _ = trained
    assert main(["predict", "--checkpoint", str(run), "--subject", "S9999", "--out", str(tmp_path)]) == 2
    assert main(["predict", "--checkpoint", str(run), "--subject", "S0000", "--data", str(tiny_tetra_dataset.root),
                 "--out", str(tmp_path)]) == 2
    assert main(["predict", "--checkpoint", str(tmp_path / "missing.ckpt"), "--subject", "S0000", "--out", str(tmp_path)]) == 2


def test_evaluate_writes_tables(trained, tmp_path, capsys):
    run, _ = trained
    out = tmp_path / "eval"
    assert main(["evaluate", "--checkpoint", str(run), "--split", "test", "--out", str(out), "--workers", "1"]) == 0
    rows = _csv(out / "metrics.csv")
    structures = {r["structure"] for r in rows}
    assert {"all", "LV_endo", "LV_epi", "LV_myo", "RV", "LA", "RA"} <= structures
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_samples"] == 2 and summary["summary"]["all"]["mae_mm"]["mean"] > 0
    clinical = _csv(out / "clinical.csv")
    assert len(clinical) == 1 and float(clinical[0]["gt_LVEDV"]) > float(clinical[0]["gt_LVESV"]) > 0


def test_gt_as_prediction_scores_perfectly(tiny_dataset):
    samples = tiny_dataset.load_split("test")
    result = evaluate_predictions(samples, [s.gt.coords for s in samples], load_template("surface").topology)
    for r in result["rows"]:
        assert r["mae_mm"] == 0.0
        if r["dice"] != "":
            assert r["dice"] == 1.0 and r["hd_mm"] == 0.0 and r["mcd_mm"] == 0.0
    c = result["clinical"][0]
    assert c["pred_LVEF"] == c["gt_LVEF"] > 0


def test_quality_on_regular_tetra(tmp_path, capsys):
    assert main(["quality", "--mesh", str(ASSETS / "regular_tetra.node"), "--out", str(tmp_path)]) == 0
    rows = {r["metric"]: r for r in _csv(tmp_path / "quality.csv")}
    assert list(_csv(tmp_path / "quality.csv")[0]) == ["metric", "mean", "std", "min", "max", "p1", "p5", "p25", "p50", "p75"]
    expected = {"scaled_jacobian": 1, "aspect_ratio": 1, "mean_ratio": 1, "shape_quality": 1, "skewness": 0}
    for metric, value in expected.items():
        for col in ("mean", "min", "max", "p50"):
            assert float(rows[metric][col]) == pytest.approx(value, abs=1e-12)
        assert float(rows[metric]["std"]) == pytest.approx(0, abs=1e-12)


def test_quality_dir_histogram_counts(tiny_tetra_dataset, tmp_path):
    assert main(["quality", "--dir", str(tiny_tetra_dataset.root), "--out", str(tmp_path)]) == 0
    per_mesh = _csv(tmp_path / "per_mesh.csv")
    assert len(per_mesh) == 6
    hist = _csv(tmp_path / "sj_histogram.csv")
    n_elements = sum(int(r["elements"]) for r in per_mesh)
    assert sum(int(r["count"]) for r in hist) == n_elements
    assert main(["quality", "--dir", str(tmp_path / "empty"), "--out", str(tmp_path)]) == 2


def test_plot_emits_svgs(trained, tmp_path, capsys):
    run, _ = trained
    assert main(["plot", "--run-dir", str(run)]) == 0
    for name in ("loss_curves.svg", "mse_curves.svg"):
        text = (run / name).read_text()
        assert text.startswith("<svg") and "<polyline" in text
    q = tmp_path / "q"
    assert main(["quality", "--mesh", str(ASSETS / "regular_tetra"), "--out", str(q)]) == 0
    assert main(["plot", "--run-dir", str(q)]) == 0
    assert "<rect" in (q / "sj_histogram.svg").read_text()
    assert main(["plot", "--run-dir", str(tmp_path / "nothing")]) == 2
