import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from lngt import datagen, noise
from lngt.cli import EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_blobs_is_valid_and_repeatable(tmp_path, capsys):
    args = ["gen", "blobs", "--k", 10, "--n", 100, "--seed", 1, "-o", tmp_path / "d.json"]
    assert run(args, capsys)[0] == EXIT_OK
    first = (tmp_path / "d.json").read_bytes()
    ds = datagen.load_dataset(tmp_path / "d.json")
    assert ds.num_classes == 10 and len(ds) == 1000
    assert run(args, capsys)[0] == EXIT_OK
    assert (tmp_path / "d.json").read_bytes() == first


@pytest.mark.parametrize("argv", [
    ["gen", "blobs", "--k", "1", "-o", "x.json"],
    ["gen", "blobs", "--k", "ten", "-o", "x.json"],
    ["gen", "rings", "--n", "-5", "-o", "x.json"],
    ["gen", "views", "--fraction", "1.5", "-o", "v"],
    ["gen", "nothing", "-o", "x.json"],
    ["train-classifier", "--data", "missing.json", "--test", "missing.json", "-o", "r"],
    ["fit-field", "--viewset", "missing.json", "-o", "f"],
    ["run", "--config", "missing.json"],
    [],
])
def test_validation_errors_exit_2_with_json(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(argv, capsys)
    assert code == EXIT_USAGE
    assert "error" in json.loads(err.strip().splitlines()[-1])


def test_noise_flip_fraction_and_matrix(tmp_path, capsys):
    run(["gen", "rings", "--n", 500, "--seed", 0, "-o", tmp_path / "clean.json"], capsys)
    code, _, _ = run(["noise", "--input", tmp_path / "clean.json", "--kind", "symmetric",
                      "--eta", 0.4, "--seed", 3, "-o", tmp_path / "noisy.json"], capsys)
    assert code == EXIT_OK
    ds = datagen.load_dataset(tmp_path / "noisy.json")
    flips = int(ds.mislabeled.sum())
    lo, hi = stats.binom(len(ds), 0.4).ppf([0.0005, 0.9995])
    assert lo <= flips <= hi
    Q = json.loads((tmp_path / "noisy_matrix.json").read_text())
    rows = np.asarray(Q["matrix"] if isinstance(Q, dict) else Q, dtype=float)
    assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-12)


def test_noise_eta_zero_keeps_labels(tmp_path, capsys):
    run(["gen", "blobs", "--k", 3, "--n", 20, "-o", tmp_path / "c.json"], capsys)
    run(["noise", "--input", tmp_path / "c.json", "--eta", 0, "-o", tmp_path / "n.json"], capsys)
    a = datagen.load_dataset(tmp_path / "c.json")
    b = datagen.load_dataset(tmp_path / "n.json")
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.clean_labels, b.clean_labels)
    assert np.array_equal(b.noisy_labels, b.clean_labels)


def test_noise_asymmetric_pairs(tmp_path, capsys):
    run(["gen", "blobs", "--k", 3, "--n", 50, "-o", tmp_path / "c.json"], capsys)
    code, _, _ = run(["noise", "--input", tmp_path / "c.json", "--kind", "asymmetric", "--eta", 0.3,
                      "--pairs", "2,0,1", "-o", tmp_path / "n.json", "--matrix", tmp_path / "q.json"], capsys)
    assert code == EXIT_OK
    ds = datagen.load_dataset(tmp_path / "n.json")
    flipped = ds.mislabeled
    expect = np.array([2, 0, 1])[ds.clean_labels[flipped]]
    assert np.array_equal(ds.noisy_labels[flipped], expect)
    assert (tmp_path / "q.json").exists()


def test_losses_check_passes_and_round_trips(tmp_path, capsys):
    code, out, _ = run(["losses", "check", "--points", 20, "-o", tmp_path / "rep.json"], capsys)
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep == json.loads((tmp_path / "rep.json").read_text())
    assert rep["failures"] == []
    assert json.loads(json.dumps(rep)) == rep


def test_losses_check_reports_failures(capsys, monkeypatch):
    from lngt import losses
    real = losses.verification_report

    def broken(**kw):
        rep = real(**kw)
        rep["failures"] = ["gradient:CE"]
        return rep

    monkeypatch.setattr(losses, "verification_report", broken)
    code, _, err = run(["losses", "check", "--points", 5], capsys)
    assert code == EXIT_VERIFY
    assert json.loads(err)["failures"] == ["gradient:CE"]


@pytest.fixture(scope="module")
def rings_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("rings")
    tr = datagen.make_rings(60, 0.05, seed=2, nuisance_dims=4, nuisance_std=0.05)
    te = datagen.make_rings(60, 0.05, seed=1002, nuisance_dims=4, nuisance_std=0.05)
    datagen.save_dataset(noise.apply_label_noise(tr, noise.build_symmetric(2, 0.4), 2), root / "tr.json")
    datagen.save_dataset(te, root / "te.json")
    return root


def test_train_classifier_outputs_and_determinism(rings_files, tmp_path, capsys):
    argv = ["train-classifier", "--data", rings_files / "tr.json", "--test", rings_files / "te.json",
            "--regime", "m_correction", "--epochs", 6, "--warmup-epochs", 2, "--hidden", "8,8"]
    code, out, _ = run(argv + ["-o", tmp_path / "a"], capsys)
    assert code == EXIT_OK
    assert set(json.loads(out)) == {"best_epoch", "best_test_acc_clean", "final_test_acc_clean",
                                    "final_train_acc_noisy"}
    run(argv + ["-o", tmp_path / "b"], capsys)
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a and a == b
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["config"]["hidden"] == [8, 8]


def test_train_config_file_with_flag_override(rings_files, tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"regime": "bootstrap", "epochs": 3, "beta": 0.5}))
    argv = ["train-classifier", "--data", rings_files / "tr.json", "--test", rings_files / "te.json",
            "--train-config", tmp_path / "cfg.json", "--beta", 0.9, "-o", tmp_path / "r"]
    assert run(argv, capsys)[0] == EXIT_OK
    conf = json.loads((tmp_path / "r" / "summary.json").read_text())["config"]
    assert conf["regime"] == "bootstrap" and conf["beta"] == 0.9 and conf["epochs"] == 3


def test_train_rejects_unknown_config_key(rings_files, tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"regimen": "vanilla"}))
    code, _, err = run(["train-classifier", "--data", rings_files / "tr.json", "--test",
                        rings_files / "te.json", "--train-config", tmp_path / "cfg.json",
                        "-o", tmp_path / "r"], capsys)
    assert code == EXIT_USAGE and "regimen" in json.loads(err)["error"]


def test_fit_field_outputs_and_determinism(tmp_path, capsys):
    run(["gen", "views", "--width", 16, "--height", 16, "--views", 3, "--patch-min", 2,
         "--patch-max", 4, "-o", tmp_path / "scene"], capsys)
    viewset = next((tmp_path / "scene").glob("*.json"))
    argv = ["fit-field", "--viewset", viewset, "--regime", "masked", "--steps", 40,
            "--warmup-steps", 20, "--mask-refresh-interval", 10, "--checkpoint-interval", 20,
            "--num-freqs", 3, "--hidden", "8", "--batch-size", 128]
    code, out, _ = run(argv + ["-o", tmp_path / "f1"], capsys)
    assert code == EXIT_OK and "final_psnr_vs_latent" in json.loads(out)
    run(argv + ["-o", tmp_path / "f2"], capsys)
    a = tree_bytes(tmp_path / "f1")
    assert a == tree_bytes(tmp_path / "f2")
    for name in ("renders/step_0.ppm", "renders/step_40.ppm", "mask_40.ppm", "hist_20.csv",
                 "trace.csv", "summary.json"):
        assert name in a


def test_run_writes_only_under_output_dir(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = {"kind": "classifier", "seed": 1, "output_dir": "runs/x",
           "dataset": {"generator": "rings", "per_class": 40, "nuisance_dims": 2, "test_per_class": 30},
           "noise": {"kind": "symmetric", "eta": 0.2},
           "train": {"epochs": 2, "hidden": [4]}}
    (tmp_path / "exp.json").write_text(json.dumps(cfg))
    before = set(tmp_path.rglob("*"))
    code, out, _ = run(["run", "--config", "exp.json"], capsys)
    assert code == EXIT_OK
    new = set(tmp_path.rglob("*")) - before
    out_dir = (tmp_path / "runs" / "x").resolve()
    assert new
    for p in new:
        assert p.resolve() == out_dir or out_dir in p.resolve().parents or p.resolve() == out_dir.parent
    assert (out_dir / "matrix.json").exists()


def test_run_rejects_unknown_key(tmp_path, capsys):
    (tmp_path / "exp.json").write_text(json.dumps({"kind": "field", "seed": 0, "colour": "red"}))
    code, _, err = run(["run", "--config", tmp_path / "exp.json"], capsys)
    assert code == EXIT_USAGE and "colour" in json.loads(err)["error"]


def _fake_summary(path: Path, regime: str, seed: int, best: float):
    path.mkdir(parents=True)
    doc = {"config": {"regime": regime, "seed": seed}, "best_epoch": 3, "best_test_acc_clean": best,
           "final_test_acc_clean": best - 0.1, "final_train_acc_noisy": 0.99}
    (path / "summary.json").write_text(json.dumps(doc))


def test_report_six_rows(tmp_path, capsys):
    for regime in ("vanilla", "m_correction"):
        for seed in range(3):
            _fake_summary(tmp_path / "runs" / f"{regime}_{seed}", regime, seed, 0.9 + seed / 100)
    code, out, _ = run(["report", tmp_path / "runs", "-o", tmp_path / "table.csv"], capsys)
    assert code == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "table.csv").read_text())))
    assert len(rows) == 6
    assert sorted((r["regime"], r["seed"]) for r in rows) == sorted(
        (g, str(s)) for g in ("vanilla", "m_correction") for s in range(3))
    assert {float(r["best_test_acc_clean"]) for r in rows} == {0.9, 0.91, 0.92}


def test_report_on_real_runs_to_stdout(rings_files, tmp_path, capsys):
    for regime in ("vanilla", "small_loss"):
        run(["train-classifier", "--data", rings_files / "tr.json", "--test", rings_files / "te.json",
             "--regime", regime, "--epochs", 2, "-o", tmp_path / regime], capsys)
    code, out, _ = run(["report", tmp_path / "vanilla", tmp_path / "small_loss" / "summary.json"], capsys)
    assert code == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["regime"] for r in rows] == ["vanilla", "small_loss"]
    assert all(r["kind"] == "classifier" for r in rows)


def test_report_without_inputs_exits_2(tmp_path, capsys):
    assert run(["report"], capsys)[0] == EXIT_USAGE
    (tmp_path / "empty").mkdir()
    assert run(["report", tmp_path / "empty"], capsys)[0] == EXIT_USAGE
    assert run(["report", tmp_path / "nope"], capsys)[0] == EXIT_USAGE


def test_module_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "lngt", "gen", "image", "-o", str(tmp_path / "i.ppm")],
                        capture_output=True, text=True)
    assert ok.returncode == 0
    assert datagen.read_ppm(tmp_path / "i.ppm").shape == (64, 64, 3)
    bad = subprocess.run([sys.executable, "-m", "lngt", "gen", "blobs", "--k", "0", "-o", "x"],
                         capture_output=True, text=True, cwd=tmp_path)
    assert bad.returncode == 2
    assert "error" in json.loads(bad.stderr)


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "lngt", "--help"], capture_output=True, text=True).stdout
    for name in ("gen", "noise", "losses", "train-classifier", "fit-field", "run", "report"):
        assert name in out
