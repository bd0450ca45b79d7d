import csv
import json
from pathlib import Path

import numpy as np
import pytest

from insample.cli import main

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *args):
    code = main([str(a) for a in args])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def summary(path):
    with open(path, newline="") as fh:
        return {r["key"]: r["value"] for r in csv.DictReader(fh)}


def test_simulate_matches_golden(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--model", "2", "--n", 20, "--seed", 7,
                       "--out", tmp_path)
    assert code == 0
    assert json.loads(out)["outputs"] == ["sample.csv"]
    got = (tmp_path / "sample.csv").read_bytes()
    assert got == (GOLDEN / "simulate_model2_n20_seed7.csv").read_bytes()
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "simulate" and man["seeds"] == [7]
    assert set(man["versions"]) == {"insample", "python", "numpy", "scipy"}
    assert man["wall_time_seconds"] >= 0


def test_rerun_from_manifest_is_bit_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "simulate", "--model", "1", "--n", 150, "--seed", 3, "--out", a)[0] == 0
    assert run(capsys, "fit", "--data", a / "sample.csv", "--h1", 0.1, "--h2", 0.12,
               "--M", 101, "--out", a / "fit")[0] == 0
    assert run(capsys, "fit", "--config", a / "fit" / "manifest.json",
               "--out", b / "fit")[0] == 0
    for name in ("surface.csv", "marginals.csv", "f1.csv", "f2.csv", "f3.csv"):
        assert (a / "fit" / name).read_bytes() == (b / "fit" / name).read_bytes(), name


def test_fit_outputs(tmp_path, capsys):
    run(capsys, "simulate", "--n", 300, "--seed", 4, "--out", tmp_path)
    code, _, _ = run(capsys, "fit", "--data", tmp_path / "sample.csv", "--out", tmp_path / "fit",
                     "--m1", 101, "--m2", 101, "--m3", 101, "--M", 101)
    assert code == 0
    s = summary(tmp_path / "fit" / "summary.csv")
    assert s["converged"] == "True" and int(s["n"]) == 300
    with open(tmp_path / "fit" / "f1.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["coordinate", "value", "sd", "flag"]
    assert len(rows) == 101


def test_fit_direct_marginals(tmp_path, capsys):
    run(capsys, "simulate", "--n", 300, "--seed", 4, "--out", tmp_path)
    code, _, _ = run(capsys, "fit", "--data", tmp_path / "sample.csv", "--marginals", "direct",
                     "--h3", 0.1, "--M", 101, "--out", tmp_path / "fit")
    assert code == 0


def test_region_file_on_command_line(tmp_path, capsys):
    reg = tmp_path / "tri.region"
    reg.write_text("polygon\n-1 0 0\n0 -1 0\n1 1 1\n")
    run(capsys, "simulate", "--n", 200, "--seed", 1, "--out", tmp_path)
    code, _, _ = run(capsys, "fit", "--data", tmp_path / "sample.csv", "--region", f"@{reg}",
                     "--M", 101, "--out", tmp_path / "fit")
    assert code == 0


def test_claims_then_forecast(tmp_path, capsys):
    cl, fc = tmp_path / "cl", tmp_path / "fc"
    code, _, _ = run(capsys, "claims", "--m1", 101, "--m2", 101, "--m3", 101, "--M", 201,
                     "--out", cl)
    assert code == 0
    s = summary(cl / "summary.csv")
    assert int(s["m"]) == 264 and int(s["n"]) == 2606 and float(s["J"]) == 22.0
    assert s["stage"] == "two-stage"
    assert (cl / "stage1_f3.csv").exists()
    code, _, _ = run(capsys, "forecast", "--components", cl, "--augment", "--out", fc)
    assert code == 0
    with open(fc / "forecast_cells.csv", newline="") as fh:
        total = sum(float(r["expected"]) for r in csv.DictReader(fh))
    # the tabulated components are the ones the claims fit used
    assert total == pytest.approx(float(s["forecast_total"]), rel=1e-3)


def test_claims_single_stage(tmp_path, capsys):
    code, _, _ = run(capsys, "claims", "--h1", 0.05, "--no-augment", "--clip", "--M", 201,
                     "--m1", 101, "--m2", 101, "--m3", 101, "--out", tmp_path)
    assert code == 0
    s = summary(tmp_path / "summary.csv")
    assert s["stage"] == "single" and int(s["n"]) == 1516
    assert not (tmp_path / "stage1_f3.csv").exists()


def test_asymptotics(tmp_path, capsys):
    code, _, _ = run(capsys, "asymptotics", "--n", 300, "--M", 101, "--out", tmp_path)
    assert code == 0
    with open(tmp_path / "sigma3_identity.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    assert max(float(r["rel_diff"]) for r in rows) < 1e-6
    with open(tmp_path / "bands_f1.csv", newline="") as fh:
        sds = [float(r["sd"]) for r in csv.DictReader(fh)]
    assert np.nanmin(sds) > 0


def test_study_small(tmp_path, capsys):
    code, _, _ = run(capsys, "study", "--n", 100, "--reps", 3, "--h", 0.1, 0.12, "--ll-h", 0.1,
                     "--threads", 2, "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / "table.csv").read_text().splitlines()
    assert lines[0] == "model,statistic,f1,f2,f3,joint,local-linear-joint"
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert len(man["seeds"]) == 3


def test_output_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("INSAMPLE_OUTPUT_DIR", str(tmp_path))
    code, out, _ = run(capsys, "simulate", "--n", 10)
    assert code == 0
    assert (tmp_path / "simulate" / "sample.csv").exists()
    assert json.loads(out)["out"] == str(tmp_path / "simulate")


def test_flags_override_config(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("n = 12\nseed = 5\n")
    run(capsys, "simulate", "--config", cfg, "--n", 7, "--out", tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"]["n"] == 7 and man["config"]["seed"] == 5
    assert len((tmp_path / "sample.csv").read_text().splitlines()) == 8


@pytest.mark.parametrize("args,flag", [
    (["simulate", "--n", "-3"], "--n"),
    (["simulate", "--n", "2.5"], "--n"),
    (["simulate", "--model", "7"], "--model"),
    (["fit", "--data", "x.csv", "--delta", "1.5"], "--delta"),
    (["fit", "--data", "x.csv", "--M", "20"], "--M"),
    (["fit", "--data", "x.csv", "--region", "hexagon"], "--region"),
    (["fit"], "--data"),
    (["study", "--reps", "1"], "--reps"),
    (["claims", "--two-stage", "0.05", "0.01"], "--two-stage"),
    (["simulate", "--bogus", "1"], None),
])
def test_invalid_arguments_exit_2(tmp_path, capsys, args, flag):
    code, out, err = run(capsys, *args, "--out", tmp_path)
    assert code == 2
    assert out == ""
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["status"] == "error"
    if flag:
        assert payload["flag"] == flag
        assert flag in payload["message"]


def test_unknown_config_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = red\n")
    code, _, err = run(capsys, "simulate", "--config", cfg, "--out", tmp_path)
    assert code == 2
    assert json.loads(err)["flag"] == "--config"


def test_unreadable_inputs_exit_3(tmp_path, capsys):
    code, _, err = run(capsys, "fit", "--data", tmp_path / "missing.csv", "--out", tmp_path)
    assert code == 3
    assert json.loads(err)["flag"] == "--data"
    bad = tmp_path / "tri.csv"
    bad.write_text("k,l,count\n1,1,-4\n")
    code, _, err = run(capsys, "claims", "--data", bad, "--out", tmp_path)
    assert code == 3
    assert "negative" in json.loads(err)["message"]


def test_nonconvergence_exit_3(tmp_path, capsys):
    run(capsys, "simulate", "--n", 200, "--seed", 2, "--out", tmp_path)
    code, _, err = run(capsys, "fit", "--data", tmp_path / "sample.csv", "--max-iters", 1,
                       "--M", 101, "--out", tmp_path / "fit")
    assert code == 3
    assert "did not converge" in json.loads(err.strip().splitlines()[-1])["message"]
